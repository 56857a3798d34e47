"""Multi-contact particle filter with exploration particles.

Each hypothesized contact owns a set of particles living on the preprocessed
link meshes. One iteration runs, in order: the random-walk motion model over
the geodesic neighbor tables, the sampled-partner measurement update (particle
weights from the force-fit residual), the exploration-particle bookkeeping
(forced relocation to chain-adjacent links while the set explains the
measurements poorly), systematic resampling that never eliminates exploration
particles, and particle-set management (spawn a set when the measurements are
unexplained, drop a set that has become redundant).
"""

from __future__ import annotations

import configparser
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .contactmodel import _nnls_batched, cone_matrices, contact_blocks
from .errors import InputError
from .kinematics import ChainModel, _fk_full
from .mesh import LinkSurface, NeighborTable, Particle, sample_faces, sample_particles

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    """Tunable knobs of the filter. All defaults are overridable via file."""

    particles_per_set: int = 100
    alpha: float = 7.7  # weight sharpness: a 0.3 N residual halves the weight
    epsilon_bar: float = 2e-5  # residual threshold (N^2-scale objective units)
    motion_p: float = 0.4  # geometric step parameter over neighbor rank
    explore_cap: Optional[int] = None  # defaults to particles_per_set // 5
    mu: float = 0.5
    set_add_cooldown: int = 100  # iterations before another set may be added
    set_add_patience: int = 5  # consecutive unexplained iterations before adding
    explore_patience: int = 10  # unexplained iterations before explorers launch
    reseed_after: int = 40  # sustained unexplained iterations between set reseeds
    max_sets: Optional[int] = None  # defaults to the identifiability bound (n+6)//4
    seed: int = 0

    def __post_init__(self):
        if self.particles_per_set < 2:
            raise InputError("particles_per_set must be >= 2")
        if self.alpha <= 0:
            raise InputError("alpha must be positive")
        if self.epsilon_bar <= 0:
            raise InputError("epsilon_bar must be positive")
        if not 0.0 < self.motion_p < 1.0:
            raise InputError("motion_p must be in (0, 1)")
        if self.explore_cap is None:
            object.__setattr__(self, "explore_cap", max(1, self.particles_per_set // 5))
        if not 0 < self.explore_cap < self.particles_per_set:
            raise InputError("explore_cap must be in (0, particles_per_set)")
        if self.mu <= 0:
            raise InputError("mu must be positive")
        if self.set_add_cooldown < 0:
            raise InputError("set_add_cooldown must be >= 0")
        if self.set_add_patience < 1:
            raise InputError("set_add_patience must be >= 1")
        if self.explore_patience < 1:
            raise InputError("explore_patience must be >= 1")
        if self.reseed_after < 1:
            raise InputError("reseed_after must be >= 1")
        if self.max_sets is not None and self.max_sets < 1:
            raise InputError("max_sets must be >= 1")


_CONFIG_KEYS = {
    "particles_per_set",
    "alpha",
    "epsilon_bar",
    "motion_p",
    "explore_cap",
    "mu",
    "set_add_cooldown",
    "set_add_patience",
    "explore_patience",
    "reseed_after",
    "max_sets",
    "seed",
}
_INT_KEYS = {
    "particles_per_set",
    "explore_cap",
    "set_add_cooldown",
    "set_add_patience",
    "explore_patience",
    "reseed_after",
    "max_sets",
    "seed",
}


def parse_filter_config(text: str) -> FilterConfig:
    """Parse a [filter] INI section; unknown keys are rejected."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"filter config: {exc}") from None
    if parser.sections() != ["filter"]:
        raise InputError("filter config must contain exactly one [filter] section")
    kwargs = {}
    for key, value in parser["filter"].items():
        if key not in _CONFIG_KEYS:
            raise InputError(f"filter config: unknown key '{key}'")
        kwargs[key] = int(value) if key in _INT_KEYS else float(value)
    return FilterConfig(**kwargs)


def load_filter_config(path) -> FilterConfig:
    with io.open(path, "r", encoding="utf-8") as handle:
        return parse_filter_config(handle.read())


@dataclass
class ParticleSet:
    """One contact hypothesis: particles, weights, and explore bookkeeping.

    ``explore_order`` is -1 for basic particles, otherwise the insertion
    sequence number of the exploration particle (larger = newer).
    """

    links: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    explore_order: np.ndarray
    created_at: int
    best_particle: Optional[Particle] = None
    best_residual_sq: float = float("inf")
    max_weight: float = 0.0
    explore_counter: int = 0

    @classmethod
    def scattered(cls, surfaces, rng, size, created_at):
        links, faces = sample_particles(surfaces, rng, size)
        return cls(
            links=links,
            faces=faces,
            weights=np.full(size, 1.0 / size),
            explore_order=np.full(size, -1, dtype=np.int64),
            created_at=created_at,
        )

    @property
    def size(self):
        return self.links.shape[0]

    @property
    def explore_mask(self):
        return self.explore_order >= 0


@dataclass
class FilterState:
    """All particle sets plus the iteration counter.

    ``unexplained_streak`` counts consecutive iterations in which the argmax
    particles failed to explain the measurements; set management spawns a new
    set only after the streak outlasts the configured patience.
    """

    config: FilterConfig
    sets: List[ParticleSet] = field(default_factory=list)
    iteration: int = 0
    unexplained_streak: int = 0
    explained_residual: float = float("inf")
    reseed_cycle: int = 0
    sweep_cycle: int = 0


class GeometryCache:
    """Per-configuration cache of world-frame face data and system blocks.

    Valid for one (chain, surfaces, mu) triple; recomputed whenever the
    queried joint configuration changes.
    """

    def __init__(self, chain: ChainModel, surfaces: Sequence[LinkSurface], mu: float):
        self.chain = chain
        self.surfaces = surfaces
        self.mu = mu
        self._q = None
        self._fk = None
        self._blocks = {}
        self._grams = {}
        self._points = {}

    def ensure(self, q):
        q = np.asarray(q, dtype=float)
        if self._q is None or not np.array_equal(q, self._q):
            self._q = q.copy()
            self._fk = _fk_full(self.chain, q)
            self._blocks.clear()
            self._grams.clear()
            self._points.clear()

    def _build(self, link):
        surface = self.surfaces[link]
        blocks, points, _ = contact_blocks(
            self._fk, surface, np.arange(surface.face_count), self.mu, self.chain.n
        )
        self._blocks[link] = blocks
        self._points[link] = points

    def blocks(self, link):
        if link not in self._blocks:
            self._build(link)
        return self._blocks[link]

    def points(self, link):
        if link not in self._blocks:
            self._build(link)
        return self._points[link]

    def grams(self, link):
        if link not in self._grams:
            blk = self.blocks(link)
            self._grams[link] = np.einsum("fad,fbd->fab", blk, blk)
        return self._grams[link]

    def block_for(self, particle: Particle):
        return self.blocks(particle.link_index)[particle.face_index]

    def point_for(self, particle: Particle):
        return self.points(particle.link_index)[particle.face_index]


def _weighted_index(rng, weights) -> int:
    total = float(weights.sum())
    if total <= 0.0:
        return int(rng.integers(weights.shape[0]))
    cum = np.cumsum(weights)
    return int(min(np.searchsorted(cum, rng.random() * total, side="right"), weights.shape[0] - 1))


def motion_model(state: FilterState, tables: Sequence[NeighborTable], rng) -> FilterState:
    """Random walk over neighbor rank: face changes, link never does."""
    p = state.config.motion_p
    for pset in state.sets:
        steps = rng.geometric(p, size=pset.size) - 1
        for link in np.unique(pset.links):
            table = tables[link]
            sel = pset.links == link
            rank = np.minimum(steps[sel], table.k - 1)
            pset.faces[sel] = table.face_ids[pset.faces[sel], rank]
    return state


_REFINE_TOP = 6  # candidate particles per set entering the argmax election
_SWEEP_EVERY = 20  # unexplained iterations between exhaustive sweep elections
_REFIT_DISCARD_EVERY = 25  # explained iterations between leave-one-out refits


def _joint_gram(blocks_list):
    """Stack per-contact blocks into one system matrix (4k, n+6)."""
    return np.concatenate(blocks_list, axis=0)


def _residual_for(matrix, w, max_iter=None):
    """Optimal fit residual of one stacked system; inf if the solver fails."""
    gram = matrix @ matrix.T
    rhs = matrix @ w
    if max_iter is None:
        max_iter = 6 * matrix.shape[0]
    x, _, failed = _nnls_batched(gram[None], rhs[None], max_iter)
    if failed[0]:
        return float("inf"), x[0]
    r = w - matrix.T @ x[0]
    return float(r @ r), x[0]


def _score_hypotheses(cache, links, faces, partner_blocks, slot, k, w, set_label=None):
    """Joint fit residuals for a batch of own-particle hypotheses.

    Each hypothesis occupies contact slot ``slot`` of a k-contact system whose
    other slots hold the fixed ``partner_blocks`` (in set order). Solver
    failures score as inf.
    """
    links = np.asarray(links)
    faces = np.asarray(faces)
    m = links.shape[0]
    width = cache.chain.n + 6
    own_blocks = np.empty((m, 4, width))
    own_grams = np.empty((m, 4, 4))
    for link in np.unique(links):
        sel = links == link
        own_blocks[sel] = cache.blocks(link)[faces[sel]]
        own_grams[sel] = cache.grams(link)[faces[sel]]

    d = 4 * k
    gram = np.empty((m, d, d))
    rhs = np.empty((m, d))
    slot_blocks = []
    pos = 0
    for j in range(k):
        if j == slot:
            slot_blocks.append(None)
        else:
            slot_blocks.append(partner_blocks[pos])
            pos += 1
    for a in range(k):
        blk_a = slot_blocks[a]
        rng_a = slice(4 * a, 4 * a + 4)
        if blk_a is None:
            rhs[:, rng_a] = own_blocks @ w
        else:
            rhs[:, rng_a] = blk_a @ w
        for b in range(k):
            blk_b = slot_blocks[b]
            rng_b = slice(4 * b, 4 * b + 4)
            if blk_a is None and blk_b is None:
                gram[:, rng_a, rng_b] = own_grams
            elif blk_a is None:
                gram[:, rng_a, rng_b] = own_blocks @ blk_b.T
            elif blk_b is None:
                gram[:, rng_a, rng_b] = (own_blocks @ blk_a.T).transpose(0, 2, 1)
            else:
                gram[:, rng_a, rng_b] = blk_a @ blk_b.T

    coeff, _, failed = _nnls_batched(gram, rhs, 6 * d)

    # residuals computed directly against the measurement for precision
    fit = np.einsum("mi,mij->mj", coeff[:, 4 * slot : 4 * slot + 4], own_blocks)
    for a in range(k):
        if a == slot:
            continue
        fit += coeff[:, 4 * a : 4 * a + 4] @ slot_blocks[a]
    resid = w[None, :] - fit
    residual_sq = np.einsum("mj,mj->m", resid, resid)
    if failed.any():
        if set_label is not None:
            logger.warning(
                "force fit failed for %d particles in set %s", int(failed.sum()), set_label
            )
        residual_sq[failed] = np.inf
    return residual_sq


def _sweep_descent(cache, start, w, passes=2):
    """Alternating exhaustive argmin over every face of every link, one
    contact slot at a time, the other slots held fixed."""
    k = len(start)
    current = list(start)
    best = float("inf")
    n_links = len(cache.surfaces)
    for _ in range(passes):
        improved = False
        for i in range(k):
            others = [p for j, p in enumerate(current) if j != i]
            partner_blocks = [cache.block_for(p) for p in others]
            used = {p.link_index for p in others}
            slot_best = best
            slot_particle = current[i]
            for link in range(n_links):
                if link in used:
                    continue
                count = cache.surfaces[link].face_count
                scores = _score_hypotheses(
                    cache, np.full(count, link), np.arange(count), partner_blocks, i, k, w
                )
                order = np.lexsort((np.arange(count), scores))
                winner = int(order[0])
                if scores[winner] < slot_best:
                    slot_best = float(scores[winner])
                    slot_particle = Particle(link, winner)
            if slot_particle != current[i] or not np.isfinite(best):
                current[i] = slot_particle
                improved = improved or slot_best < best
                best = slot_best
        if not improved:
            break
    return current, best


def _pair_enumeration(cache, link_a, link_b, stride, w):
    """Best (face_a, face_b) combination on two links by strided enumeration.

    Scores every combination of subsampled faces jointly; the winner seeds a
    full-resolution descent. Mutual-compensation valleys that defeat
    coordinate-wise search cannot hide from a joint scan.
    """
    faces_a = np.arange(0, cache.surfaces[link_a].face_count, stride)
    faces_b = np.arange(0, cache.surfaces[link_b].face_count, stride)
    blk_a = cache.blocks(link_a)[faces_a]  # (A,4,d)
    blk_b = cache.blocks(link_b)[faces_b]  # (B,4,d)
    count_a, count_b = faces_a.shape[0], faces_b.shape[0]
    total = count_a * count_b
    gram = np.empty((count_a, count_b, 8, 8))
    gram[:, :, :4, :4] = np.einsum("aij,akj->aik", blk_a, blk_a)[:, None]
    gram[:, :, 4:, 4:] = np.einsum("bij,bkj->bik", blk_b, blk_b)[None, :]
    cross = np.einsum("aij,bkj->abik", blk_a, blk_b)
    gram[:, :, :4, 4:] = cross
    gram[:, :, 4:, :4] = cross.transpose(0, 1, 3, 2)
    rhs = np.empty((count_a, count_b, 8))
    rhs[:, :, :4] = (blk_a @ w)[:, None]
    rhs[:, :, 4:] = (blk_b @ w)[None, :]
    coeff, _, failed = _nnls_batched(gram.reshape(total, 8, 8), rhs.reshape(total, 8), 48)
    fit = np.einsum("abi,aij->abj", coeff.reshape(count_a, count_b, 8)[:, :, :4], blk_a)
    fit += np.einsum("abi,bij->abj", coeff.reshape(count_a, count_b, 8)[:, :, 4:], blk_b)
    residual = np.square(w[None, None, :] - fit).sum(axis=2).reshape(total)
    residual[failed] = np.inf
    winner = int(np.argmin(residual))
    face_a = int(faces_a[winner // count_b])
    face_b = int(faces_b[winner % count_b])
    return [Particle(link_a, face_a), Particle(link_b, face_b)], float(residual[winner])


def _sweep_elect(cache, state, chosen, joint_residual, w, rng):
    """Global refinement of the elected particles by exhaustive sweeps.

    Each invocation runs one alternating all-link descent, cycling through
    three kinds of start: the current election, a peeled start (descend one
    contact at a time from scratch, mirroring the sequential-contact story),
    and, for two contacts, a strided joint enumeration over the elected link
    pair. Breaks the mutual-compensation deadlock where the clouds hover
    near, but never exactly on, the jointly best faces.
    """
    k = len(chosen)
    kind = state.sweep_cycle % 3 if k > 1 else 0
    state.sweep_cycle += 1
    if kind == 0:
        start = list(chosen)
    elif kind == 1:
        # peeled start: locate one contact as if it were alone, keep the
        # current election for the remaining slots
        first, _ = _sweep_descent(cache, [chosen[0]], w, passes=1)
        start = first + list(chosen[1:])
    elif k == 2 and chosen[0].link_index != chosen[1].link_index:
        start, _ = _pair_enumeration(
            cache, chosen[0].link_index, chosen[1].link_index, 3, w
        )
    else:
        links, faces = sample_particles(cache.surfaces, rng, k)
        start = [Particle(int(l), int(f)) for l, f in zip(links, faces)]
        if len({p.link_index for p in start}) != k:
            start = list(chosen)
    current, best = _sweep_descent(cache, start, w)
    if best >= joint_residual:
        return list(chosen), joint_residual
    return current, best


def _expand_with_table(cache, tables, particles):
    """Particles plus every neighbor-table face of each particle's face."""
    seen = dict.fromkeys(particles)
    if tables is not None:
        for particle in particles:
            table = tables[particle.link_index]
            for face in table.face_ids[particle.face_index]:
                seen.setdefault(Particle(particle.link_index, int(face)))
    return list(seen)


def _refine_argmaxes(cache, candidates, w):
    """Coordinate descent over per-set candidate particles.

    Starting from each set's own top candidate, repeatedly re-elect one set's
    particle to minimize the joint fit residual while the others stay fixed,
    scanning each slot's whole candidate list in one batched solve.
    Combinations that put two contacts on one link are infeasible. Returns the
    elected particles and their joint residual.
    """

    def joint(parts):
        links = [p.link_index for p in parts]
        if len(set(links)) != len(links):
            return float("inf")
        matrix = _joint_gram([cache.block_for(p) for p in parts])
        residual, _ = _residual_for(matrix, w)
        return residual

    current = [cand[0] for cand in candidates]
    k = len(current)
    if k == 1:
        links = np.array([p.link_index for p in candidates[0]])
        faces = np.array([p.face_index for p in candidates[0]])
        scores = _score_hypotheses(cache, links, faces, [], 0, 1, w)
        order = np.lexsort((faces, links, scores))
        winner = int(order[0])
        return [candidates[0][winner]], float(scores[winner])
    best = joint(current)
    for _ in range(2):
        improved = False
        for i, options in enumerate(candidates):
            others = [p for j, p in enumerate(current) if j != i]
            used = {p.link_index for p in others}
            usable = [p for p in options if p.link_index not in used]
            if not usable:
                continue
            partner_blocks = [cache.block_for(p) for p in others]
            links = np.array([p.link_index for p in usable])
            faces = np.array([p.face_index for p in usable])
            scores = _score_hypotheses(cache, links, faces, partner_blocks, i, k, w)
            order = np.lexsort((faces, links, scores))
            winner = int(order[0])
            if scores[winner] < best:
                best = float(scores[winner])
                current = list(current)
                current[i] = usable[winner]
                improved = True
        if not improved:
            break
    return current, best


def measurement_update(state: FilterState, chain, q, surfaces, w_hat, rng) -> FilterState:
    """Weight every particle by how well it explains the measurements.

    For each set, one partner particle is drawn from every other set by
    weight; each particle is then scored through the force-fit residual of the
    joint system (its own face plus the fixed partners) and weights are
    exp(-alpha * (residual - best_residual)), normalized per set.
    """
    if not state.sets:
        raise InputError("measurement_update requires at least one particle set")
    w = np.asarray(getattr(w_hat, "w_hat", w_hat), dtype=float)
    cfg = state.config
    cache = _get_cache(state, chain, surfaces)
    cache.ensure(q)
    k = len(state.sets)

    partners = []  # for set i: list of (set_index, Particle)
    for i in range(k):
        chosen = []
        for j in range(k):
            if j == i:
                continue
            pset = state.sets[j]
            idx = _weighted_index(rng, pset.weights)
            chosen.append((j, Particle(int(pset.links[idx]), int(pset.faces[idx]))))
        partners.append(chosen)

    candidates = []  # per set: best few distinct particles by residual
    for i, pset in enumerate(state.sets):
        partner_links = [p.link_index for _, p in partners[i]]
        partner_blocks = [cache.block_for(p) for _, p in partners[i]]
        residual_sq = _score_hypotheses(
            cache, pset.links, pset.faces, partner_blocks, i, k, w, set_label=i
        )
        if partner_links:
            dup = np.isin(pset.links, partner_links)
            residual_sq[dup] = np.inf  # one contact per link

        order = np.lexsort((pset.faces, pset.links, residual_sq))
        best = order[0]
        best_res = float(residual_sq[best])
        top = []
        for idx in order:
            particle = Particle(int(pset.links[idx]), int(pset.faces[idx]))
            if particle not in top:
                top.append(particle)
            if len(top) >= _REFINE_TOP:
                break
        # the previous elected best competes even if the cloud moved off it
        if pset.best_particle is not None and pset.best_particle not in top:
            top.append(pset.best_particle)
        if state.explained_residual > cfg.epsilon_bar:
            # while unexplained, widen the election to the full geodesic
            # neighborhoods of the leading candidates; the jointly best faces
            # form minima too sharp for the strided or sampled views to see
            top = _expand_with_table(cache, getattr(state, "_tables", None), top)
        candidates.append(top)

        if np.isfinite(best_res):
            weights = np.exp(-cfg.alpha * (residual_sq - best_res))
            weights[~np.isfinite(residual_sq)] = 0.0
        else:
            weights = np.zeros(pset.size)
        total = weights.sum()
        if total <= 0.0:
            logger.warning("all particle weights vanished in set %d, using uniform", i)
            weights = np.full(pset.size, 1.0 / pset.size)
        else:
            weights = weights / total
        pset.weights = weights
        pset.max_weight = float(weights.max())

    # Elect the per-set argmax particles jointly: coordinate descent over each
    # set's top candidates, scored by the joint fit residual with the other
    # sets' elected particles. Sampled partners stay confined to the weights,
    # where their randomness helps; the election removes their jitter from the
    # reported estimate and from the explained/unexplained decision.
    chosen, joint_residual = _refine_argmaxes(cache, candidates, w)
    # a sustained unexplained streak means the clouds hover near a coupled
    # local minimum; periodically re-elect by exhaustive within-link sweep
    if (
        joint_residual > cfg.epsilon_bar
        and state.unexplained_streak >= _SWEEP_EVERY
        and state.unexplained_streak % _SWEEP_EVERY == 0
    ):
        chosen, joint_residual = _sweep_elect(cache, state, chosen, joint_residual, w, rng)
    for pset, particle in zip(state.sets, chosen):
        pset.best_particle = particle
        pset.best_residual_sq = joint_residual
    state.explained_residual = joint_residual
    return state


def update_exploration_particles(state: FilterState, surfaces, rng) -> FilterState:
    """While the argmax particles explain the measurements poorly, push one
    particle per iteration and set onto a chain-adjacent link; once they
    explain, fold the explorers back into the basic population.

    Launching waits for ``explore_patience`` consecutive unexplained
    iterations: a converged configuration jitters above the threshold under
    partner sampling but dips below it regularly, whereas a wrong-link lock-in
    never dips, so the streak separates the two without eroding healthy sets.
    """
    cfg = state.config
    n_links = len(surfaces)
    unexplained = state.explained_residual > cfg.epsilon_bar
    sustained = unexplained and state.unexplained_streak >= cfg.explore_patience
    for pset in state.sets:
        if sustained:
            explore = pset.explore_mask
            n_explore = int(explore.sum())
            if n_explore < cfg.explore_cap:
                basic_idx = np.flatnonzero(~explore)
                pick = int(basic_idx[rng.integers(basic_idx.shape[0])])
            else:
                # at capacity: recycle the oldest explorer to keep searching
                explore_idx = np.flatnonzero(explore)
                pick = int(explore_idx[np.argmin(pset.explore_order[explore_idx])])
            current = int(pset.links[pick])
            candidates = [l for l in (current - 1, current + 1) if 0 <= l < n_links]
            if not candidates:
                continue
            target = candidates[int(rng.integers(len(candidates)))]
            pset.links[pick] = target
            pset.faces[pick] = int(sample_faces(surfaces[target], rng))
            pset.weights[pick] = 0.0
            pset.explore_order[pick] = pset.explore_counter
            pset.explore_counter += 1
        elif not unexplained:
            pset.explore_order[:] = -1
    return state


def resample_with_explorers(state: FilterState, rng) -> FilterState:
    """Systematic resampling of the basic slots from the whole set.

    Basic particles are redrawn (copies proportional to weight, including
    copies of exploration particles); exploration particles themselves are
    never eliminated. Weights reset to uniform.
    """
    for i, pset in enumerate(state.sets):
        m = pset.size
        weights = pset.weights
        total = float(weights.sum())
        if total <= 0.0 or not np.isfinite(total):
            logger.warning("degenerate weights in set %d, resampling uniformly", i)
            weights = np.full(m, 1.0 / m)
            total = 1.0
        basic_slots = np.flatnonzero(~pset.explore_mask)
        nb = basic_slots.shape[0]
        if nb == 0:
            pset.weights = np.full(m, 1.0 / m)
            continue
        positions = (np.arange(nb) + rng.random()) / nb
        cum = np.cumsum(weights / total)
        sel = np.minimum(np.searchsorted(cum, positions, side="right"), m - 1)
        pset.links[basic_slots] = pset.links[sel]
        pset.faces[basic_slots] = pset.faces[sel]
        pset.weights = np.full(m, 1.0 / m)
    return state


def _best_particles(state: FilterState, exclude: Optional[int] = None):
    return [
        pset.best_particle
        for idx, pset in enumerate(state.sets)
        if idx != exclude and pset.best_particle is not None
    ]


def _joint_best_residual(state, cache, particles, w) -> float:
    """Fit residual at a list of best particles; ||w||^2 when empty."""
    if not particles:
        return float(w @ w)
    matrix = _joint_gram([cache.block_for(p) for p in particles])
    residual, _ = _residual_for(matrix, w)
    return residual


def manage_particle_sets(state: FilterState, chain, q, surfaces, w_hat, rng) -> FilterState:
    """Spawn a set when the measurements are unexplained; drop redundant sets.

    A new set is added only after ``set_add_cooldown`` iterations have passed
    since the youngest set appeared, giving that set time to converge (the
    contacts are assumed to arrive sequentially), and never beyond the
    identifiability bound (n+6)//4: with more sets the force fit is trivially
    exact and carries no position information.
    """
    w = np.asarray(getattr(w_hat, "w_hat", w_hat), dtype=float)
    cfg = state.config
    cache = _get_cache(state, chain, surfaces)
    cache.ensure(q)
    max_sets = cfg.max_sets if cfg.max_sets is not None else (chain.n + 6) // 4

    eps = _joint_best_residual(state, cache, _best_particles(state), w)
    if eps > cfg.epsilon_bar:
        state.unexplained_streak += 1
        youngest = max((p.created_at for p in state.sets), default=None)
        ready = youngest is None or state.iteration - youngest >= cfg.set_add_cooldown
        # patience guards against partner-sampling jitter, which only exists
        # once sets are being weighted; the first set is added immediately
        patient = not state.sets or state.unexplained_streak >= cfg.set_add_patience
        if ready and patient and len(state.sets) < max_sets:
            state.sets.append(
                ParticleSet.scattered(surfaces, rng, cfg.particles_per_set, state.iteration)
            )
            state.unexplained_streak = 0
        elif state.sets and state.unexplained_streak % cfg.reseed_after == 0:
            # sustained failure to explain: re-scatter one set's basic
            # particles so the search can leave a shallow coupled valley;
            # youngest sets restart first, the elected bests stay on record
            # and keep competing, and the add cooldown clock is untouched
            order = sorted(
                range(len(state.sets)),
                key=lambda idx: (-state.sets[idx].created_at, idx),
            )
            target = state.sets[order[state.reseed_cycle % len(state.sets)]]
            state.reseed_cycle += 1
            basic = np.flatnonzero(~target.explore_mask)
            links, faces = sample_particles(surfaces, rng, basic.shape[0])
            target.links[basic] = links
            target.faces[basic] = faces
            target.weights = np.full(target.size, 1.0 / target.size)
        if (
            len(state.sets) >= 2
            and state.unexplained_streak % _REFIT_DISCARD_EVERY == 0
            and _refit_discard(state, cache, w)
        ):
            return state
        return state
    state.unexplained_streak = 0
    for i in range(len(state.sets)):
        eps_without = _joint_best_residual(state, cache, _best_particles(state, exclude=i), w)
        if eps_without < cfg.epsilon_bar:
            state.sets.pop(i)
            return state
    # co-adapted elected particles can hide redundancy from the test above:
    # periodically retry each leave-one-out subset with a fresh sweep descent
    if len(state.sets) >= 2 and state.iteration % _REFIT_DISCARD_EVERY == 0:
        _refit_discard(state, cache, w)
    return state


def _refit_discard(state, cache, w) -> bool:
    """Drop the first set whose removal still leaves an explanation after a
    leave-one-out refit. Returns True if a set was discarded.

    Pairs are refit by strided joint enumeration plus descent, since the
    co-adapted survivors rarely descend out of their compensation valley on
    their own.
    """
    for i in range(len(state.sets)):
        remaining = _best_particles(state, exclude=i)
        if len(remaining) != len(state.sets) - 1:
            continue
        if (
            len(remaining) == 2
            and remaining[0].link_index != remaining[1].link_index
        ):
            seed_pair, _ = _pair_enumeration(
                cache, remaining[0].link_index, remaining[1].link_index, 3, w
            )
            refit, residual = _sweep_descent(cache, seed_pair, w, passes=2)
            alt, alt_res = _sweep_descent(cache, remaining, w, passes=1)
            if alt_res < residual:
                refit, residual = alt, alt_res
        else:
            refit, residual = _sweep_descent(cache, remaining, w, passes=1)
        if residual < state.config.epsilon_bar:
            state.sets.pop(i)
            # hand the refit result to the surviving sets so the next
            # election starts from the explanation that justified the drop
            for pset, particle in zip(state.sets, refit):
                pset.best_particle = particle
                pset.best_residual_sq = residual
            state.explained_residual = residual
            state.unexplained_streak = 0
            return True
    return False


def filter_step(state: FilterState, chain, q, w_hat, surfaces, tables, rng) -> FilterState:
    """One full iteration: motion, measurement, exploration, resampling, set
    management, in exactly that order."""
    state.iteration += 1
    state._tables = tables  # lets the argmax election scan geodesic neighborhoods
    if state.sets:
        motion_model(state, tables, rng)
        measurement_update(state, chain, q, surfaces, w_hat, rng)
        update_exploration_particles(state, surfaces, rng)
        resample_with_explorers(state, rng)
    manage_particle_sets(state, chain, q, surfaces, w_hat, rng)
    return state


@dataclass(frozen=True)
class ContactEstimate:
    """Argmax particle, world point, and force per set, plus fit diagnostics."""

    particles: tuple
    points: np.ndarray
    forces: np.ndarray
    residual_sq: float
    max_weights: tuple


def extract_estimate(state: FilterState, chain, q, surfaces, w_hat) -> ContactEstimate:
    """Contact estimate from the highest-weight particle of every set."""
    if not state.sets:
        raise InputError("extract_estimate requires at least one particle set")
    w = np.asarray(getattr(w_hat, "w_hat", w_hat), dtype=float)
    cache = _get_cache(state, chain, surfaces)
    cache.ensure(q)
    particles = []
    for pset in state.sets:
        if pset.best_particle is None:
            order = np.lexsort((pset.faces, pset.links))
            particles.append(Particle(int(pset.links[order[0]]), int(pset.faces[order[0]])))
        else:
            particles.append(pset.best_particle)
    blocks = [cache.block_for(p) for p in particles]
    matrix = _joint_gram(blocks)
    residual, coeff = _residual_for(matrix, w)
    normals = np.stack(
        [cache.surfaces[p.link_index].normals[p.face_index] for p in particles]
    )
    # support matrices in world frame, rebuilt from the cached fk rotations
    forces = np.empty((len(particles), 3))
    for idx, p in enumerate(particles):
        rot = cache._fk.rotations[p.link_index]
        world_normal = rot @ normals[idx]
        support = cone_matrices(world_normal[None], cache.mu)[0]
        forces[idx] = support @ coeff[4 * idx : 4 * idx + 4]
    points = np.stack([cache.point_for(p) for p in particles])
    return ContactEstimate(
        particles=tuple(particles),
        points=points,
        forces=forces,
        residual_sq=residual,
        max_weights=tuple(pset.max_weight for pset in state.sets),
    )


def _get_cache(state: FilterState, chain, surfaces) -> GeometryCache:
    cache = getattr(state, "_geometry_cache", None)
    if cache is None or cache.chain is not chain or cache.surfaces is not surfaces or cache.mu != state.config.mu:
        cache = GeometryCache(chain, surfaces, state.config.mu)
        state._geometry_cache = cache
    return cache
