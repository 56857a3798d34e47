"""Synthetic ground truth, sensor synthesis, trials, and benchmarks.

Scenarios apply step contact forces to a simulated arm, synthesize the sensor
stream (joint torques plus base force/torque, optional Gaussian noise), run it
through the observer and the particle filter, and score localization success,
convergence steps, RMSE, and per-iteration run time.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .contactmodel import cone_basis, cone_contains, _tangent_seed
from .errors import InputError
from .filter import FilterConfig, FilterState, extract_estimate, filter_step, _get_cache
from .kinematics import (
    BaseWrench,
    ChainModel,
    JointState,
    _fk_full,
    bias_vector,
    gravity_vector,
    mass_matrix,
    parse_chain,
    rnea,
    wrench_base_to_sensor,
    wrench_sensor_to_base,
)
from .mesh import (
    LinkSurface,
    NeighborTable,
    Particle,
    build_neighbor_table,
    check_surfaces,
    sample_faces,
)
from .sensing import ObserverState, SensorFrame, estimate_base_wrench, observer_core, observer_step
from .shapes import cylinder_link

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLD_M = 0.0225  # localization success radius, meters
DEFAULT_FORCE_N = 20.0
DEFAULT_ONSET_GAP_S = 0.1


# ---------------------------------------------------------------------------
# Bundled arm
# ---------------------------------------------------------------------------

# (radius, length) of each link cylinder, matching assets/arm7.chain
_LINK_GEOMETRY = [
    (0.050, 0.14),
    (0.046, 0.14),
    (0.042, 0.13),
    (0.040, 0.13),
    (0.037, 0.12),
    (0.034, 0.11),
    (0.032, 0.12),
]


def default_chain() -> ChainModel:
    """The bundled 7-joint arm."""
    text = resources.files("contactloc").joinpath("assets/arm7.chain").read_text("utf-8")
    return parse_chain(text)


@dataclass(frozen=True)
class ChainAssets:
    """A chain with its preprocessed link surfaces and neighbor tables."""

    chain: ChainModel
    surfaces: Tuple[LinkSurface, ...]
    tables: Tuple[NeighborTable, ...]


def build_assets(chain, surfaces, k_neighbors: int = 64) -> ChainAssets:
    check_surfaces(chain, surfaces)
    tables = tuple(build_neighbor_table(s, min(k_neighbors, s.face_count)) for s in surfaces)
    return ChainAssets(chain=chain, surfaces=tuple(surfaces), tables=tables)


@lru_cache(maxsize=4)
def default_assets(edge: float = 0.0078, k_neighbors: int = 64) -> ChainAssets:
    """Bundled arm with synthetic cylinder meshes at the given edge length."""
    chain = default_chain()
    surfaces = []
    for i, (radius, length) in enumerate(_LINK_GEOMETRY):
        verts, faces = cylinder_link(radius, length, edge)
        surfaces.append(LinkSurface.from_arrays(i, verts, faces))
    return build_assets(chain, tuple(surfaces), k_neighbors)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthContact:
    """A step contact force applied from ``onset`` on.

    ``force_local`` is expressed in the link frame so the force stays inside
    the face's friction cone even if the arm moves.
    """

    link: int
    face: int
    force_local: np.ndarray
    onset: float


@dataclass(frozen=True)
class NoiseModel:
    tau_std: float = 0.0
    force_std: float = 0.0
    moment_std: float = 0.0

    @property
    def any(self):
        return self.tau_std > 0 or self.force_std > 0 or self.moment_std > 0


@dataclass(frozen=True)
class Trajectory:
    """Static hold (default) or a slow joint-space sinusoid."""

    q0: np.ndarray
    amplitude: Optional[np.ndarray] = None
    frequency_hz: float = 0.0

    @property
    def static(self):
        return self.amplitude is None or self.frequency_hz == 0.0

    def state(self, t: float) -> JointState:
        q0 = self.q0
        if self.static:
            zero = np.zeros_like(q0)
            return JointState(q0, zero, zero)
        omega = 2.0 * math.pi * self.frequency_hz
        q = q0 + self.amplitude * np.sin(omega * t)
        dq = self.amplitude * omega * np.cos(omega * t)
        ddq = -self.amplitude * omega * omega * np.sin(omega * t)
        return JointState(q, dq, ddq)


@dataclass(frozen=True)
class Scenario:
    assets: ChainAssets
    contacts: Tuple[GroundTruthContact, ...]
    trajectory: Trajectory
    noise: NoiseModel = NoiseModel()
    duration: float = 0.6
    rate: float = 1000.0
    observer_gain: float = 200.0
    mu: float = 0.5

    def __post_init__(self):
        links = [c.link for c in self.contacts]
        if len(set(links)) != len(links):
            raise InputError("scenario places more than one contact on a link")
        onsets = [c.onset for c in self.contacts]
        if sorted(onsets) != onsets:
            raise InputError("scenario contacts must be ordered by onset")
        if self.duration <= 0 or self.rate <= 0:
            raise InputError("scenario duration and rate must be positive")


def sample_cone_force(surface: LinkSurface, face: int, mu: float, magnitude: float, rng):
    """Rejection-sample a force uniformly inside the face's circular friction
    cone until it also lies in the polyhedral cone used by the solver."""
    normal = surface.normals[face]
    basis = cone_basis(normal, mu)
    t1 = _tangent_seed(normal[None])[0]
    t2 = np.cross(normal, t1)
    cos_max = 1.0 / math.sqrt(1.0 + mu * mu)
    while True:
        cos_t = cos_max + (1.0 - cos_max) * rng.random()
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        phi = 2.0 * math.pi * rng.random()
        direction = -normal * cos_t + sin_t * (math.cos(phi) * t1 + math.sin(phi) * t2)
        force = magnitude * direction
        if cone_contains(basis, force, tol=1e-9):
            return force


def random_scenario(
    assets: ChainAssets,
    n_contacts: int,
    rng,
    *,
    noise: NoiseModel = NoiseModel(),
    force_n: float = DEFAULT_FORCE_N,
    onset_gap: float = DEFAULT_ONSET_GAP_S,
    first_onset: float = 0.02,
    settle: float = 0.45,
    rate: float = 1000.0,
    mu: float = 0.5,
    observer_gain: float = 200.0,
) -> Scenario:
    """Random configuration, random contact faces, in-cone forces."""
    chain = assets.chain
    if not 1 <= n_contacts <= chain.n:
        raise InputError(f"n_contacts must be in [1, {chain.n}]")
    q0 = rng.uniform(-2.0, 2.0, chain.n)
    links = rng.choice(chain.n, size=n_contacts, replace=False)
    contacts = []
    for i, link in enumerate(links):
        surface = assets.surfaces[int(link)]
        face = int(sample_faces(surface, rng))
        force = sample_cone_force(surface, face, mu, force_n, rng)
        contacts.append(
            GroundTruthContact(int(link), face, force, first_onset + i * onset_gap)
        )
    duration = contacts[-1].onset + settle
    return Scenario(
        assets=assets,
        contacts=tuple(contacts),
        trajectory=Trajectory(q0=q0),
        noise=noise,
        duration=duration,
        rate=rate,
        mu=mu,
        observer_gain=observer_gain,
    )


def synthesize_measurements(scenario: Scenario, t: float, rng=None) -> SensorFrame:
    """One synthetic sensor frame at time ``t``.

    Joint torques balance the dynamics given the active contacts and the base
    channel carries the nominal wrench plus each contact's force and moment.
    """
    if not 0.0 <= t <= scenario.duration:
        raise InputError(f"t={t} outside scenario duration {scenario.duration}")
    chain = scenario.assets.chain
    state = scenario.trajectory.state(t)
    fk = _fk_full(chain, state.q)
    active = []
    for contact in scenario.contacts:
        if t >= contact.onset:
            surface = scenario.assets.surfaces[contact.link]
            rot = fk.rotations[contact.link]
            point = rot @ surface.centroids[contact.face] + fk.origins[contact.link]
            active.append((contact.link, point, rot @ contact.force_local))
    tau_j, base = rnea(chain, state, contact_forces=active)
    ft_raw = wrench_base_to_sensor(base, chain.base_offset)
    noise = scenario.noise
    if noise.any:
        if rng is None:
            raise InputError("a noisy scenario needs an rng")
        tau_j = tau_j + rng.normal(0.0, noise.tau_std, chain.n)
        ft_raw = BaseWrench(
            ft_raw.force + rng.normal(0.0, noise.force_std, 3),
            ft_raw.moment + rng.normal(0.0, noise.moment_std, 3),
        )
    return SensorFrame(t=t, q=state.q, dq=state.dq, tau_j=tau_j, ft_raw=ft_raw)


class _StaticSensing:
    """Observer and base-wrench pipeline with the static-configuration terms
    precomputed; arithmetic matches the general path to rounding."""

    def __init__(self, chain: ChainModel, q):
        self.chain = chain
        self.q = np.asarray(q, dtype=float)
        self.mass = mass_matrix(chain, q)
        self.gravity_tau = gravity_vector(chain, q)
        self.bias = bias_vector(chain, q, np.zeros(chain.n))
        zero = np.zeros(chain.n)
        _, self.static_base = rnea(chain, JointState(self.q, zero, zero))
        cols = []
        for j in range(chain.n):
            ddq = np.zeros(chain.n)
            ddq[j] = 1.0
            _, wrench = rnea(chain, JointState(self.q, zero, ddq), include_gravity=False)
            cols.append(wrench.as_array())
        self.accel_to_base = np.array(cols).T  # (6, n)

    def observer(self, state: ObserverState, frame: SensorFrame, dt: float) -> ObserverState:
        return observer_core(state, self.mass, self.bias, frame.tau_j, frame.dq, dt)

    def base_wrench(self, frame: SensorFrame, tau_ext_hat) -> np.ndarray:
        ddq_n = np.linalg.solve(self.mass, frame.tau_j + tau_ext_hat - self.gravity_tau)
        nominal = self.static_base.as_array() + self.accel_to_base @ ddq_n
        measured = wrench_sensor_to_base(frame.ft_raw, self.chain.base_offset)
        return measured.as_array() - nominal


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass
class TrialMetrics:
    """Scores of one trial; position RMSE inputs include failed contacts."""

    n_contacts: int
    contact_links: Tuple[int, ...]
    success: List[bool]
    conv_steps: List[Optional[int]]
    pos_errors_m: List[float]
    force_errors_n: List[float]
    mean_step_ms: float
    iterations: int
    final_sets: int

    @property
    def trial_success(self):
        return all(self.success)


def _match_estimates(truth_points, est_points):
    """Greedy nearest pairing; returns per-truth matched estimate index."""
    k = truth_points.shape[0]
    s = est_points.shape[0]
    match = [None] * k
    if s == 0:
        return match
    cost = np.linalg.norm(truth_points[:, None, :] - est_points[None, :, :], axis=2)
    cost = cost.copy()
    for _ in range(min(k, s)):
        idx = np.unravel_index(np.argmin(cost), cost.shape)
        match[idx[0]] = int(idx[1])
        cost[idx[0], :] = np.inf
        cost[:, idx[1]] = np.inf
    return match


def _best_points(state: FilterState, cache):
    points = []
    for pset in state.sets:
        if pset.best_particle is None:
            return None
        points.append(cache.point_for(pset.best_particle))
    return np.array(points) if points else np.empty((0, 3))


def run_trial(
    scenario: Scenario,
    config: FilterConfig,
    rng,
    *,
    success_threshold: float = SUCCESS_THRESHOLD_M,
    hold_steps: int = 10,
) -> TrialMetrics:
    """Stream the scenario through observer and filter and score it.

    Convergence steps count filter iterations from the creation of the
    contact's particle set to the first time its localization error drops
    under the threshold. The trial ends early once every contact has been
    localized for ``hold_steps`` consecutive iterations; run time is measured
    over the filter step alone.
    """
    chain = scenario.assets.chain
    surfaces = scenario.assets.surfaces
    tables = scenario.assets.tables
    dt = 1.0 / scenario.rate
    n_frames = int(round(scenario.duration * scenario.rate))
    k_true = len(scenario.contacts)

    observer = ObserverState.zeros(chain.n, scenario.observer_gain)
    if config.mu != scenario.mu:
        config = replace(config, mu=scenario.mu)
    state = FilterState(config=config)
    static = scenario.trajectory.static
    sensing = _StaticSensing(chain, scenario.trajectory.q0) if static else None
    cache = _get_cache(state, chain, surfaces)

    creation_iter: List[Optional[int]] = [None] * k_true
    conv_iter: List[Optional[int]] = [None] * k_true
    streak = 0
    step_seconds = 0.0
    steps = 0
    last_onset = scenario.contacts[-1].onset if k_true else 0.0
    truth_points_static = None

    for frame_idx in range(n_frames):
        t = frame_idx * dt
        frame = synthesize_measurements(scenario, t, rng)
        if static:
            observer = sensing.observer(observer, frame, dt)
            wrench = sensing.base_wrench(frame, observer.tau_ext_hat)
        else:
            observer = observer_step(observer, chain, frame, dt)
            wrench = estimate_base_wrench(chain, frame, observer.tau_ext_hat).as_array()
        w_hat = np.concatenate([observer.tau_ext_hat, wrench])

        begin = time.perf_counter()
        filter_step(state, chain, frame.q, w_hat, surfaces, tables, rng)
        step_seconds += time.perf_counter() - begin
        steps += 1

        for c, contact in enumerate(scenario.contacts):
            if creation_iter[c] is None and t >= contact.onset and len(state.sets) >= c + 1:
                creation_iter[c] = state.iteration

        if state.sets:
            cache.ensure(frame.q)
            if static:
                if truth_points_static is None:
                    truth_points_static = np.array(
                        [
                            cache.point_for(Particle(c.link, c.face))
                            for c in scenario.contacts
                        ]
                    )
                truth_points = truth_points_static
            else:
                truth_points = np.array(
                    [cache.point_for(Particle(c.link, c.face)) for c in scenario.contacts]
                )
            active = [c for c in range(k_true) if t >= scenario.contacts[c].onset]
            est_points = _best_points(state, cache)
            if active and est_points is not None and est_points.shape[0]:
                match = _match_estimates(truth_points[active], est_points)
                all_ok = True
                for pos, c in enumerate(active):
                    m = match[pos]
                    err = (
                        float(np.linalg.norm(truth_points[c] - est_points[m]))
                        if m is not None
                        else float("inf")
                    )
                    if err <= success_threshold:
                        if conv_iter[c] is None and creation_iter[c] is not None:
                            conv_iter[c] = state.iteration
                    else:
                        all_ok = False
                if len(active) == k_true and all_ok:
                    streak += 1
                else:
                    streak = 0
            else:
                streak = 0
            if streak >= hold_steps and t > last_onset:
                break

    # final scoring at the last processed frame
    success = [False] * k_true
    pos_errors = [float("nan")] * k_true
    force_errors = [float("nan")] * k_true
    if steps > 0 and state.sets and k_true:
        estimate = extract_estimate(state, chain, frame.q, surfaces, w_hat)
        cache.ensure(frame.q)
        truth_points = np.array(
            [cache.point_for(Particle(c.link, c.face)) for c in scenario.contacts]
        )
        fk = cache._fk
        truth_forces = np.array(
            [fk.rotations[c.link] @ c.force_local for c in scenario.contacts]
        )
        match = _match_estimates(truth_points, estimate.points)
        for c in range(k_true):
            m = match[c]
            if m is None:
                continue
            pos_errors[c] = float(np.linalg.norm(truth_points[c] - estimate.points[m]))
            force_errors[c] = float(np.linalg.norm(truth_forces[c] - estimate.forces[m]))
            success[c] = pos_errors[c] <= success_threshold

    return TrialMetrics(
        n_contacts=k_true,
        contact_links=tuple(c.link for c in scenario.contacts),
        success=success,
        conv_steps=[
            (conv_iter[c] - creation_iter[c])
            if conv_iter[c] is not None and creation_iter[c] is not None
            else None
            for c in range(k_true)
        ],
        pos_errors_m=pos_errors,
        force_errors_n=force_errors,
        mean_step_ms=1000.0 * step_seconds / max(steps, 1),
        iterations=steps,
        final_sets=len(state.sets),
    )


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkResult:
    n_contacts: int
    trials: int
    success_rate: float  # percent, trial level (every contact localized)
    mean_conv_steps: float  # over converged contacts
    rmse_pos_cm: float  # includes failed contacts
    rmse_pos_success_cm: float
    rmse_force_n: float  # includes failed contacts
    mean_runtime_ms: float
    pair_matrix: Optional[np.ndarray] = None  # (n,n) success %, nan off-diag unseen
    pair_counts: Optional[np.ndarray] = None

    def csv_rows(self, timing: bool):
        header = [
            "contacts",
            "trials",
            "success_rate_pct",
            "mean_conv_steps",
            "rmse_pos_cm",
            "rmse_pos_success_cm",
            "rmse_force_n",
        ]
        row = [
            str(self.n_contacts),
            str(self.trials),
            f"{self.success_rate:.2f}",
            f"{self.mean_conv_steps:.2f}",
            f"{self.rmse_pos_cm:.4f}",
            f"{self.rmse_pos_success_cm:.4f}",
            f"{self.rmse_force_n:.4f}",
        ]
        if timing:
            header.append("mean_runtime_ms")
            row.append(f"{self.mean_runtime_ms:.3f}")
        return header, row


def _run_one_trial(assets, n_contacts, seed, index, config, noise, rate):
    rng = np.random.default_rng(seed + index)
    scenario = random_scenario(assets, n_contacts, rng, noise=noise, rate=rate)
    return run_trial(scenario, config, rng)


_WORKER = {}


def _worker_init(assets, n_contacts, seed, config, noise, rate):
    _WORKER.update(
        assets=assets, n_contacts=n_contacts, seed=seed, config=config, noise=noise, rate=rate
    )


def _worker_run(index):
    return _run_one_trial(
        _WORKER["assets"],
        _WORKER["n_contacts"],
        _WORKER["seed"],
        index,
        _WORKER["config"],
        _WORKER["noise"],
        _WORKER["rate"],
    )


def run_benchmark(
    assets: ChainAssets,
    n_contacts: int,
    trials: int,
    seed: int,
    *,
    config: Optional[FilterConfig] = None,
    noise: NoiseModel = NoiseModel(),
    rate: float = 1000.0,
    workers: int = 1,
    progress: bool = False,
) -> BenchmarkResult:
    """Run ``trials`` randomized scenarios; trial i uses rng seed ``seed + i``.

    Deterministic for a fixed seed regardless of the worker count.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    if config is None:
        config = FilterConfig()
    metrics: List[TrialMetrics] = []
    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(
            workers, initializer=_worker_init, initargs=(assets, n_contacts, seed, config, noise, rate)
        ) as pool:
            metrics = pool.map(_worker_run, range(trials))
    else:
        for index in range(trials):
            metrics.append(_run_one_trial(assets, n_contacts, seed, index, config, noise, rate))
            if progress and (index + 1) % 25 == 0:
                logger.info("trial %d/%d done", index + 1, trials)

    n_links = assets.chain.n
    successes = sum(1 for m in metrics if m.trial_success)
    conv = [s for m in metrics for s in m.conv_steps if s is not None]
    pos_all = [e for m in metrics for e in m.pos_errors_m if math.isfinite(e)]
    pos_succ = [
        e
        for m in metrics
        for e, ok in zip(m.pos_errors_m, m.success)
        if ok and math.isfinite(e)
    ]
    force_all = [e for m in metrics for e in m.force_errors_n if math.isfinite(e)]

    def rmse(values):
        return float(np.sqrt(np.mean(np.square(values)))) if values else float("nan")

    pair_matrix = None
    pair_counts = None
    if n_contacts == 2:
        wins = np.zeros((n_links, n_links))
        counts = np.zeros((n_links, n_links))
        for m in metrics:
            a, b = m.contact_links
            counts[a, b] += 1
            wins[a, b] += 1.0 if m.trial_success else 0.0
        with np.errstate(invalid="ignore"):
            pair_matrix = np.where(counts > 0, 100.0 * wins / np.maximum(counts, 1), np.nan)
        pair_counts = counts

    return BenchmarkResult(
        n_contacts=n_contacts,
        trials=trials,
        success_rate=100.0 * successes / trials,
        mean_conv_steps=float(np.mean(conv)) if conv else float("nan"),
        rmse_pos_cm=100.0 * rmse(pos_all),
        rmse_pos_success_cm=100.0 * rmse(pos_succ),
        rmse_force_n=rmse(force_all),
        mean_runtime_ms=float(np.mean([m.mean_step_ms for m in metrics])),
        pair_matrix=pair_matrix,
        pair_counts=pair_counts,
    )


def write_benchmark_csv(path, results: Sequence[BenchmarkResult], timing: bool = False) -> None:
    """Aggregate table, one row per contact count. Timing column is opt-in so
    the default output is byte-identical for a fixed seed."""
    with io.open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        header_written = False
        for result in results:
            header, row = result.csv_rows(timing)
            if not header_written:
                writer.writerow(header)
                header_written = True
            writer.writerow(row)


def write_pair_matrix_csv(path, result: BenchmarkResult) -> None:
    if result.pair_matrix is None:
        raise InputError("pair matrix only exists for dual-contact benchmarks")
    n = result.pair_matrix.shape[0]
    with io.open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["first_link"] + [f"second_link{j + 1}" for j in range(n)])
        for i in range(n):
            row = [str(i + 1)]
            for j in range(n):
                value = result.pair_matrix[i, j]
                row.append("" if math.isnan(value) else f"{value:.2f}")
            writer.writerow(row)


def format_benchmark_table(results: Sequence[BenchmarkResult], timing: bool = True) -> str:
    lines = []
    header, _ = results[0].csv_rows(timing)
    lines.append("  ".join(f"{h:>20s}" for h in header))
    for result in results:
        _, row = result.csv_rows(timing)
        lines.append("  ".join(f"{v:>20s}" for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_SCN_SCENARIO_KEYS = {"duration", "rate", "observer_gain", "mu"}
_SCN_TRAJ_KEYS = {"type", "q0", "amplitude", "frequency_hz"}
_SCN_NOISE_KEYS = {"tau_std", "force_std", "moment_std"}
_SCN_CONTACT_KEYS = {"link", "face", "force", "onset"}


def parse_scenario(text: str, assets: ChainAssets) -> Scenario:
    """Parse a scenario description file.

    Layout::

        [scenario]
        duration = 0.6          ; seconds
        rate = 1000             ; Hz
        observer_gain = 200     ; 1/s
        mu = 0.5

        [trajectory]
        type = static           ; static | sinusoid
        q0 = 0.3 -0.5 0.4 0.9 -0.2 0.7 0.1
        ; amplitude = ...       ; sinusoid only, radians
        ; frequency_hz = 0.2

        [noise]                 ; optional, Gaussian std per channel
        tau_std = 0.0
        force_std = 0.0
        moment_std = 0.0

        [contact1]
        link = 3                ; 1-based link number
        face = 120
        force = 0 5 -19.4       ; Newtons, link frame
        onset = 0.02            ; seconds
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"scenario file: {exc}") from None
    sections = set(parser.sections())
    contact_names = sorted(s for s in sections if s.startswith("contact"))
    extra = sections - {"scenario", "trajectory", "noise"} - set(contact_names)
    if extra:
        raise InputError(f"scenario file: unknown sections {sorted(extra)}")
    if "scenario" not in sections or "trajectory" not in sections:
        raise InputError("scenario file needs [scenario] and [trajectory] sections")

    def check_keys(section, allowed):
        for key in parser[section]:
            if key not in allowed:
                raise InputError(f"scenario file: unknown key '{key}' in [{section}]")

    check_keys("scenario", _SCN_SCENARIO_KEYS)
    check_keys("trajectory", _SCN_TRAJ_KEYS)
    sec = parser["scenario"]
    duration = float(sec.get("duration", "0.6"))
    rate = float(sec.get("rate", "1000"))
    gain = float(sec.get("observer_gain", "200"))
    mu = float(sec.get("mu", "0.5"))

    traj = parser["trajectory"]
    kind = traj.get("type", "static").strip()
    q0 = np.array([float(v) for v in traj.get("q0", "").split()])
    if q0.shape[0] != assets.chain.n:
        raise InputError(f"trajectory q0 must have {assets.chain.n} entries")
    if kind == "static":
        trajectory = Trajectory(q0=q0)
    elif kind == "sinusoid":
        amp = np.array([float(v) for v in traj.get("amplitude", "").split()])
        if amp.shape[0] != assets.chain.n:
            raise InputError(f"trajectory amplitude must have {assets.chain.n} entries")
        trajectory = Trajectory(q0=q0, amplitude=amp, frequency_hz=float(traj.get("frequency_hz", "0.1")))
    else:
        raise InputError(f"unknown trajectory type '{kind}'")

    noise = NoiseModel()
    if "noise" in sections:
        check_keys("noise", _SCN_NOISE_KEYS)
        nsec = parser["noise"]
        noise = NoiseModel(
            tau_std=float(nsec.get("tau_std", "0")),
            force_std=float(nsec.get("force_std", "0")),
            moment_std=float(nsec.get("moment_std", "0")),
        )

    expected = [f"contact{i + 1}" for i in range(len(contact_names))]
    if contact_names != sorted(expected):
        raise InputError("scenario contacts must be named contact1..contactN")
    contacts = []
    for name in expected:
        check_keys(name, _SCN_CONTACT_KEYS)
        csec = parser[name]
        link = int(csec["link"]) - 1
        face = int(csec["face"])
        force = np.array([float(v) for v in csec["force"].split()])
        if force.shape[0] != 3:
            raise InputError(f"[{name}] force needs 3 components")
        onset = float(csec.get("onset", "0.02"))
        if not 0 <= link < assets.chain.n:
            raise InputError(f"[{name}] link out of range")
        if not 0 <= face < assets.surfaces[link].face_count:
            raise InputError(f"[{name}] face out of range for link {link + 1}")
        contacts.append(GroundTruthContact(link, face, force, onset))
    contacts.sort(key=lambda c: c.onset)
    return Scenario(
        assets=assets,
        contacts=tuple(contacts),
        trajectory=trajectory,
        noise=noise,
        duration=duration,
        rate=rate,
        observer_gain=gain,
        mu=mu,
    )


def load_scenario(path, assets: ChainAssets) -> Scenario:
    with io.open(path, "r", encoding="utf-8") as handle:
        return parse_scenario(handle.read(), assets)
