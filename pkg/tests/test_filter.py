import copy

import numpy as np
import pytest

from contactloc.contactmodel import assemble_contact_system, solve_force_qp
from contactloc.errors import InputError
from contactloc.filter import (
    FilterConfig,
    FilterState,
    ParticleSet,
    extract_estimate,
    filter_step,
    load_filter_config,
    manage_particle_sets,
    measurement_update,
    motion_model,
    parse_filter_config,
    resample_with_explorers,
    update_exploration_particles,
    _get_cache,
)
from contactloc.mesh import Particle, particle_to_world

import oracles


def make_state(config=None, **kw):
    return FilterState(config=config or FilterConfig(**kw))


def scattered_state(surfaces, rng, m=60, config=None):
    state = make_state(config)
    state.sets.append(ParticleSet.scattered(surfaces, rng, m, created_at=0))
    return state


def synth_measurement(chain, surfaces, particles, weights, mu=0.5, q=None):
    q = np.zeros(chain.n) if q is None else q
    system = assemble_contact_system(chain, q, surfaces, particles, mu=mu)
    return system.matrix.T @ np.asarray(weights, dtype=float)


class TestMotionModel:
    def test_degenerate_step_keeps_faces(self, surfaces, tables):
        rng = np.random.default_rng(0)
        state = scattered_state(surfaces, rng, m=200, config=FilterConfig(motion_p=0.9999))
        before = state.sets[0].faces.copy()
        motion_model(state, tables, rng)
        kept = np.mean(state.sets[0].faces == before)
        assert kept >= 0.999

    def test_links_never_change(self, surfaces, tables):
        rng = np.random.default_rng(1)
        state = scattered_state(surfaces, rng, m=500)
        before = np.sort(state.sets[0].links.copy())
        for _ in range(10):
            motion_model(state, tables, rng)
        np.testing.assert_array_equal(np.sort(state.sets[0].links), before)

    def test_geometric_rank_distribution(self, surfaces, tables):
        p = 0.4
        rng = np.random.default_rng(2)
        config = FilterConfig(motion_p=p, particles_per_set=100)
        draws = []
        k_table = tables[3].k
        for _ in range(1000):
            state = make_state(config)
            links = np.full(100, 3, dtype=np.int32)
            faces = np.full(100, 50, dtype=np.int32)
            state.sets.append(
                ParticleSet(
                    links=links,
                    faces=faces,
                    weights=np.full(100, 0.01),
                    explore_order=np.full(100, -1, dtype=np.int64),
                    created_at=0,
                )
            )
            motion_model(state, tables, rng)
            # recover the rank: the new face is table row entry s
            row = tables[3].face_ids[50]
            for f in state.sets[0].faces:
                ranks = np.where(row == f)[0]
                draws.append(ranks[0])
        draws = np.array(draws, dtype=float)
        # ranks are truncated geometric; truncation negligible for K=32
        expected_mean = (1 - p) / p
        sigma = np.sqrt((1 - p) / p**2 / draws.size)
        assert abs(draws.mean() - expected_mean) < 3 * sigma + 0.01


class TestMeasurementUpdate:
    def test_true_particle_gets_weight_one_prenormalization(self, chain, surfaces):
        rng = np.random.default_rng(3)
        q = rng.uniform(-1, 1, chain.n)
        truth = Particle(4, 25)
        w = synth_measurement(chain, surfaces, [truth], [2.0, 1.0, 0.5, 1.5], q=q)
        config = FilterConfig(particles_per_set=10)
        state = make_state(config)
        links = np.full(10, 4, dtype=np.int32)
        faces = np.arange(20, 30, dtype=np.int32)  # includes the true face 25
        state.sets.append(
            ParticleSet(
                links=links,
                faces=faces,
                weights=np.full(10, 0.1),
                explore_order=np.full(10, -1, dtype=np.int64),
                created_at=0,
            )
        )
        measurement_update(state, chain, q, surfaces, w, rng)
        pset = state.sets[0]
        assert pset.best_particle == truth
        assert pset.best_residual_sq < 1e-18
        assert np.argmax(pset.weights) == 5

    def test_identical_particles_uniform_weights(self, chain, surfaces):
        rng = np.random.default_rng(4)
        q = np.zeros(chain.n)
        w = synth_measurement(chain, surfaces, [Particle(2, 7)], [1.0, 1.0, 1.0, 1.0])
        m = 12
        state = make_state(FilterConfig(particles_per_set=m))
        state.sets.append(
            ParticleSet(
                links=np.full(m, 5, dtype=np.int32),
                faces=np.full(m, 33, dtype=np.int32),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=0,
            )
        )
        measurement_update(state, chain, q, surfaces, w, rng)
        np.testing.assert_allclose(state.sets[0].weights, 1.0 / m, atol=1e-15)

    def test_weights_normalized(self, chain, surfaces, tables):
        rng = np.random.default_rng(5)
        q = rng.uniform(-1, 1, chain.n)
        w = synth_measurement(chain, surfaces, [Particle(3, 11)], [1, 2, 1, 0.5], q=q)
        state = scattered_state(surfaces, rng, m=80)
        measurement_update(state, chain, q, surfaces, w, rng)
        assert abs(state.sets[0].weights.sum() - 1.0) < 1e-12

    def test_half_weight_at_ln2_over_alpha(self, chain, surfaces):
        # analytic check of the weight law using stored residual of the best
        rng = np.random.default_rng(6)
        q = rng.uniform(-1, 1, chain.n)
        truth = Particle(5, 60)
        w = synth_measurement(chain, surfaces, [truth], [1.5, 0.5, 1.0, 2.0], q=q)
        config = FilterConfig(particles_per_set=40, alpha=7.7)
        state = scattered_state(surfaces, rng, m=40, config=config)
        pset = state.sets[0]
        pset.links[:] = 5
        pset.faces = np.arange(40, 80, dtype=np.int32)
        measurement_update(state, chain, q, surfaces, w, rng)
        # recompute residuals directly through the public QP
        residuals = []
        for f in range(40, 80):
            system = assemble_contact_system(chain, q, surfaces, [Particle(5, f)], mu=0.5)
            residuals.append(solve_force_qp(system, w).residual_sq)
        residuals = np.array(residuals)
        expected = np.exp(-config.alpha * (residuals - residuals.min()))
        expected /= expected.sum()
        np.testing.assert_allclose(pset.weights, expected, atol=1e-8)

    def test_partner_sampling_second_set_converges_to_exhaustive_argmax(
        self, chain, surfaces
    ):
        # with set 1 converged, set 2's weights must peak where the exhaustive
        # two-contact sweep over all faces of the true link peaks
        rng = np.random.default_rng(7)
        q = rng.uniform(-1, 1, chain.n)
        first, second = Particle(2, 14), Particle(5, 77)
        w = synth_measurement(
            chain, surfaces, [first, second], [1.0, 2.0, 0.5, 1.0, 2.0, 1.0, 0.3, 0.9], q=q
        )
        m = 30
        config = FilterConfig(particles_per_set=m)
        state = make_state(config)
        state.sets.append(
            ParticleSet(  # converged set on the first contact
                links=np.full(m, 2, dtype=np.int32),
                faces=np.full(m, 14, dtype=np.int32),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=0,
            )
        )
        faces2 = np.arange(60, 90, dtype=np.int32)  # includes true face 77
        state.sets.append(
            ParticleSet(
                links=np.full(m, 5, dtype=np.int32),
                faces=faces2.copy(),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=1,
            )
        )
        measurement_update(state, chain, q, surfaces, w, rng)
        best = state.sets[1].best_particle
        # exhaustive sweep oracle over the candidate faces
        residuals = []
        for f in faces2:
            system = assemble_contact_system(
                chain, q, surfaces, [first, Particle(5, int(f))], mu=0.5
            )
            residuals.append(solve_force_qp(system, w).residual_sq)
        assert best.face_index == faces2[int(np.argmin(residuals))]

    def test_duplicate_link_particles_get_zero_weight(self, chain, surfaces):
        rng = np.random.default_rng(8)
        q = np.zeros(chain.n)
        w = synth_measurement(chain, surfaces, [Particle(3, 5)], [1, 1, 1, 1])
        m = 10
        state = make_state(FilterConfig(particles_per_set=m))
        state.sets.append(
            ParticleSet(
                links=np.full(m, 3, dtype=np.int32),
                faces=np.full(m, 5, dtype=np.int32),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=0,
            )
        )
        links2 = np.full(m, 6, dtype=np.int32)
        links2[:3] = 3  # collide with set 1's link
        state.sets.append(
            ParticleSet(
                links=links2,
                faces=np.arange(m, dtype=np.int32),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=1,
            )
        )
        measurement_update(state, chain, q, surfaces, w, rng)
        assert np.all(state.sets[1].weights[:3] == 0.0)

    def test_empty_state_rejected(self, chain, surfaces):
        state = make_state()
        with pytest.raises(InputError):
            measurement_update(state, chain, np.zeros(chain.n), surfaces, np.zeros(13), np.random.default_rng(0))


class TestExplorationParticles:
    def _converged_set(self, m=20):
        return ParticleSet(
            links=np.full(m, 3, dtype=np.int32),
            faces=np.full(m, 9, dtype=np.int32),
            weights=np.full(m, 1.0 / m),
            explore_order=np.full(m, -1, dtype=np.int64),
            created_at=0,
        )

    def test_merge_branch_empties_explore(self, surfaces):
        rng = np.random.default_rng(9)
        state = make_state(FilterConfig(particles_per_set=20, explore_cap=4))
        pset = self._converged_set()
        pset.explore_order[2] = 0
        pset.explore_order[5] = 1
        pset.best_residual_sq = 1e-9  # well below threshold
        state.sets.append(pset)
        state.explained_residual = 1e-9
        update_exploration_particles(state, surfaces, rng)
        assert int(pset.explore_mask.sum()) == 0
        assert pset.size == 20

    def test_explore_branch_moves_one_basic(self, surfaces):
        rng = np.random.default_rng(10)
        state = make_state(FilterConfig(particles_per_set=20, explore_cap=4))
        pset = self._converged_set()
        pset.best_residual_sq = 10.0  # unexplained
        state.sets.append(pset)
        state.explained_residual = 10.0
        state.unexplained_streak = 99  # past the launch patience
        update_exploration_particles(state, surfaces, rng)
        assert int(pset.explore_mask.sum()) == 1
        assert pset.size == 20
        moved = int(np.flatnonzero(pset.explore_mask)[0])
        assert pset.links[moved] in (2, 4)
        assert pset.weights[moved] == 0.0

    def test_explore_capped_recycles_oldest(self, surfaces):
        rng = np.random.default_rng(11)
        cap = 4
        state = make_state(FilterConfig(particles_per_set=20, explore_cap=cap))
        pset = self._converged_set()
        pset.best_residual_sq = 10.0
        state.sets.append(pset)
        state.explained_residual = 10.0
        state.unexplained_streak = 99
        for _ in range(10):
            update_exploration_particles(state, surfaces, rng)
            assert int(pset.explore_mask.sum()) <= cap
        assert int(pset.explore_mask.sum()) == cap
        assert pset.size == 20

    def test_adjacency_rule_audit(self, surfaces):
        rng = np.random.default_rng(12)
        seen = set()
        for _ in range(400):
            state = make_state(FilterConfig(particles_per_set=10, explore_cap=3))
            m = 10
            start_link = int(rng.integers(len(surfaces)))
            pset = ParticleSet(
                links=np.full(m, start_link, dtype=np.int32),
                faces=np.full(m, 1, dtype=np.int32),
                weights=np.full(m, 1.0 / m),
                explore_order=np.full(m, -1, dtype=np.int64),
                created_at=0,
            )
            pset.best_residual_sq = 99.0
            state.sets.append(pset)
            state.explained_residual = 99.0
            state.unexplained_streak = 99
            update_exploration_particles(state, surfaces, rng)
            moved = np.flatnonzero(pset.explore_mask)
            assert moved.size == 1
            target = int(pset.links[moved[0]])
            assert target in {start_link - 1, start_link + 1}
            assert 0 <= target < len(surfaces)
            seen.add((start_link, target))
        assert len(seen) > 8  # both directions exercised


class TestResampling:
    def _weighted_set(self, weights, explore=None):
        m = len(weights)
        pset = ParticleSet(
            links=np.arange(m, dtype=np.int32) % 7,
            faces=np.arange(m, dtype=np.int32),
            weights=np.asarray(weights, dtype=float),
            explore_order=np.full(m, -1, dtype=np.int64),
            created_at=0,
        )
        if explore:
            for rank, idx in enumerate(explore):
                pset.explore_order[idx] = rank
        return pset

    def test_degenerate_weight_all_copies(self):
        rng = np.random.default_rng(13)
        weights = np.zeros(30)
        weights[17] = 1.0
        state = make_state(FilterConfig(particles_per_set=30))
        state.sets.append(self._weighted_set(weights))
        resample_with_explorers(state, rng)
        assert np.all(state.sets[0].faces == 17)
        np.testing.assert_allclose(state.sets[0].weights, 1.0 / 30)

    def test_dominant_explorer_is_copied_and_persists(self):
        rng = np.random.default_rng(14)
        weights = np.full(20, 1e-9)
        weights[4] = 1.0
        state = make_state(FilterConfig(particles_per_set=20, explore_cap=3))
        pset = self._weighted_set(weights, explore=[4])
        state.sets.append(pset)
        resample_with_explorers(state, rng)
        # the explorer slot survives untouched
        assert pset.explore_order[4] == 0
        assert pset.faces[4] == 4
        # and the basic slots are now copies of it
        basic = ~pset.explore_mask
        assert np.all(pset.faces[basic] == 4)

    def test_systematic_variance_below_multinomial(self):
        rng = np.random.default_rng(15)
        m = 100
        weights = np.random.default_rng(0).uniform(0.5, 1.5, m)
        weights /= weights.sum()
        sys_counts = []
        multi_counts = []
        for _ in range(300):
            state = make_state(FilterConfig(particles_per_set=m))
            pset = self._weighted_set(weights)
            state.sets.append(pset)
            resample_with_explorers(state, rng)
            sys_counts.append(np.bincount(pset.faces, minlength=m))
            multi_counts.append(
                np.bincount(
                    oracles.multinomial_resample_counts(weights, m, rng), minlength=m
                )
            )
        sys_var = np.var(np.array(sys_counts), axis=0).mean()
        multi_var = np.var(np.array(multi_counts), axis=0).mean()
        assert sys_var < multi_var
        # systematic counts stay within one of the expected copy count
        counts = np.array(sys_counts)
        expected = weights * m
        assert np.max(np.abs(counts - expected)) <= 1.0 + 1e-9


class TestManageParticleSets:
    def test_empty_state_adds_set_when_unexplained(self, chain, surfaces):
        rng = np.random.default_rng(16)
        config = FilterConfig(particles_per_set=50)
        state = make_state(config)
        w = np.zeros(chain.n + 6)
        w[0] = 1.0  # |W|^2 = 1 > epsilon_bar
        manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
        assert len(state.sets) == 1
        assert state.sets[0].size == 50

    def test_empty_state_quiet_measurement_no_set(self, chain, surfaces):
        rng = np.random.default_rng(17)
        state = make_state()
        manage_particle_sets(
            state, chain, np.zeros(chain.n), surfaces, np.zeros(chain.n + 6), rng
        )
        assert state.sets == []

    def test_vanished_contact_discards_set(self, chain, surfaces):
        rng = np.random.default_rng(18)
        state = make_state(FilterConfig(particles_per_set=10))
        m = 10
        pset = ParticleSet(
            links=np.full(m, 4, dtype=np.int32),
            faces=np.full(m, 7, dtype=np.int32),
            weights=np.full(m, 0.1),
            explore_order=np.full(m, -1, dtype=np.int64),
            created_at=0,
            best_particle=Particle(4, 7),
            best_residual_sq=1e-12,
        )
        state.sets.append(pset)
        state.iteration = 100
        manage_particle_sets(
            state, chain, np.zeros(chain.n), surfaces, np.zeros(chain.n + 6), rng
        )
        assert state.sets == []

    def test_cooldown_blocks_consecutive_adds(self, chain, surfaces):
        rng = np.random.default_rng(19)
        config = FilterConfig(particles_per_set=10, set_add_cooldown=50, set_add_patience=1)
        state = make_state(config)
        w = np.full(chain.n + 6, 3.0)
        state.iteration = 1
        manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
        assert len(state.sets) == 1
        state.iteration = 10  # within cooldown, measurements still unexplained
        state.sets[0].best_particle = Particle(0, 0)
        state.sets[0].best_residual_sq = 99.0
        manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
        assert len(state.sets) == 1
        state.iteration = 60  # cooldown expired
        manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
        assert len(state.sets) == 2

    def test_patience_blocks_hasty_adds(self, chain, surfaces):
        rng = np.random.default_rng(25)
        config = FilterConfig(particles_per_set=10, set_add_cooldown=0, set_add_patience=4)
        state = make_state(config)
        w = np.full(chain.n + 6, 3.0)
        state.sets.append(
            ParticleSet(
                links=np.zeros(10, dtype=np.int32),
                faces=np.zeros(10, dtype=np.int32),
                weights=np.full(10, 0.1),
                explore_order=np.full(10, -1, dtype=np.int64),
                created_at=0,
                best_particle=Particle(0, 0),
                best_residual_sq=99.0,
            )
        )
        for calls in range(1, 4):
            state.iteration = calls
            manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
            assert len(state.sets) == 1, calls
        state.iteration = 4
        manage_particle_sets(state, chain, np.zeros(chain.n), surfaces, w, rng)
        assert len(state.sets) == 2


class TestFilterStepAndExtract:
    def test_idle_step_no_sets(self, chain, surfaces, tables):
        rng = np.random.default_rng(20)
        state = make_state()
        filter_step(state, chain, np.zeros(chain.n), np.zeros(chain.n + 6), surfaces, tables, rng)
        assert state.sets == []
        assert state.iteration == 1

    def test_deterministic_trajectories(self, chain, surfaces, tables):
        q = np.full(chain.n, 0.3)
        w = synth_measurement(
            chain, surfaces, [Particle(4, 44)], [2.0, 1.0, 1.5, 0.5], q=q
        )

        def run():
            rng = np.random.default_rng(321)
            state = make_state(FilterConfig(particles_per_set=40))
            for _ in range(25):
                filter_step(state, chain, q, w, surfaces, tables, rng)
            return state

        a, b = run(), run()
        assert a.iteration == b.iteration
        assert len(a.sets) == len(b.sets)
        for sa, sb in zip(a.sets, b.sets):
            np.testing.assert_array_equal(sa.links, sb.links)
            np.testing.assert_array_equal(sa.faces, sb.faces)
            np.testing.assert_array_equal(sa.weights, sb.weights)
            assert sa.best_particle == sb.best_particle
            assert sa.best_residual_sq == sb.best_residual_sq

    def test_particle_conservation_and_normalization(self, chain, surfaces, tables):
        rng = np.random.default_rng(22)
        q = np.full(chain.n, -0.4)
        w = synth_measurement(chain, surfaces, [Particle(5, 10)], [1, 1, 2, 1], q=q)
        config = FilterConfig(particles_per_set=30)
        state = make_state(config)
        for _ in range(40):
            filter_step(state, chain, q, w, surfaces, tables, rng)
            for pset in state.sets:
                assert pset.size == 30
                assert abs(pset.weights.sum() - 1.0) < 1e-12

    def test_single_contact_converges(self, chain, surfaces, tables):
        rng = np.random.default_rng(23)
        q = np.array([0.4, -0.9, 0.3, 1.1, -0.5, 0.8, 0.2])
        truth = Particle(5, 120)
        w = synth_measurement(chain, surfaces, [truth], [3.0, 1.0, 2.0, 1.5], q=q)
        state = make_state(FilterConfig(particles_per_set=100))
        for _ in range(60):
            filter_step(state, chain, q, w, surfaces, tables, rng)
        assert len(state.sets) == 1
        est = extract_estimate(state, chain, q, surfaces, w)
        truth_point, _ = particle_to_world(chain, q, surfaces, truth)
        assert np.linalg.norm(est.points[0] - truth_point) <= 0.0225
        assert est.residual_sq < 1e-6

    def test_extract_empty_rejected(self, chain, surfaces):
        with pytest.raises(InputError):
            extract_estimate(make_state(), chain, np.zeros(chain.n), surfaces, np.zeros(13))

    def test_extract_order_and_cardinality(self, chain, surfaces):
        rng = np.random.default_rng(24)
        q = np.zeros(chain.n)
        parts = [Particle(2, 3), Particle(5, 8)]
        w = synth_measurement(chain, surfaces, parts, [1, 1, 1, 1, 2, 1, 1, 1])
        state = make_state(FilterConfig(particles_per_set=5))
        for idx, p in enumerate(parts):
            m = 5
            state.sets.append(
                ParticleSet(
                    links=np.full(m, p.link_index, dtype=np.int32),
                    faces=np.full(m, p.face_index, dtype=np.int32),
                    weights=np.full(m, 0.2),
                    explore_order=np.full(m, -1, dtype=np.int64),
                    created_at=idx,
                    best_particle=p,
                    best_residual_sq=0.0,
                )
            )
        est = extract_estimate(state, chain, q, surfaces, w)
        assert len(est.particles) == 2
        assert est.particles[0] == parts[0]
        assert est.particles[1] == parts[1]


class TestConfigFile:
    def test_parse_and_defaults(self, tmp_path):
        path = tmp_path / "filter.ini"
        path.write_text(
            "[filter]\nparticles_per_set = 64\nalpha = 12\nepsilon_bar = 0.1\n"
            "motion_p = 0.3\nexplore_cap = 9\nmu = 0.4\nset_add_cooldown = 25\nseed = 5\n"
        )
        config = load_filter_config(path)
        assert config.particles_per_set == 64
        assert config.alpha == 12.0
        assert config.epsilon_bar == 0.1
        assert config.motion_p == 0.3
        assert config.explore_cap == 9
        assert config.mu == 0.4
        assert config.set_add_cooldown == 25
        assert config.seed == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(InputError):
            parse_filter_config("[filter]\nbogus = 3\n")

    def test_invalid_values_rejected(self):
        with pytest.raises(InputError):
            FilterConfig(particles_per_set=1)
        with pytest.raises(InputError):
            FilterConfig(alpha=0.0)
        with pytest.raises(InputError):
            FilterConfig(motion_p=1.0)
        with pytest.raises(InputError):
            FilterConfig(explore_cap=200, particles_per_set=100)
