"""Turns raw sensor data into the stacked external-wrench estimate.

Pipeline: a momentum observer estimates the external joint torque from joint
torque readings, the contact-induced base wrench is isolated by subtracting a
nominal inverse-dynamics wrench from the base force/torque reading, and both
are stacked into one (n+6)-vector.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .kinematics import (
    BaseWrench,
    ChainModel,
    JointState,
    bias_vector,
    mass_matrix,
    rnea,
    wrench_sensor_to_base,
    _vec,
)


@dataclass(frozen=True)
class SensorFrame:
    """One sample of all proprioceptive channels.

    ``ft_raw`` is what the mount exerts on link 0, expressed in the sensor
    frame (identical to the base frame unless the chain has a sensor offset).
    """

    t: float
    q: np.ndarray
    dq: np.ndarray
    tau_j: np.ndarray
    ft_raw: BaseWrench


@dataclass(frozen=True)
class ObserverState:
    """Internal state of the momentum observer.

    ``gain`` holds the diagonal observer gains (1/s); the observer behaves as
    a first-order low-pass filter of the true external torque with those
    cutoffs.
    """

    integral: np.ndarray
    tau_ext_hat: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        n = self.integral.shape[0]
        object.__setattr__(self, "integral", _vec(self.integral, n, "integral"))
        object.__setattr__(self, "tau_ext_hat", _vec(self.tau_ext_hat, n, "tau_ext_hat"))
        object.__setattr__(self, "gain", _vec(self.gain, n, "gain"))
        if np.any(self.gain <= 0):
            raise InputError("observer gains must be strictly positive")

    @classmethod
    def zeros(cls, n: int, gain=100.0):
        g = np.full(n, float(gain)) if np.isscalar(gain) else np.asarray(gain, dtype=float)
        return cls(np.zeros(n), np.zeros(n), g)


def observer_core(state: ObserverState, mass_m, bias, tau_j, dq, dt: float) -> ObserverState:
    """One forward-Euler observer update with precomputed dynamics terms."""
    p = mass_m @ dq
    integral = state.integral + dt * (tau_j + bias + state.tau_ext_hat)
    tau_hat = state.gain * (p - integral)
    return ObserverState(integral, tau_hat, state.gain)


def observer_step(state: ObserverState, chain: ChainModel, frame: SensorFrame, dt: float) -> ObserverState:
    """Advance the momentum observer by one sample of duration ``dt``."""
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    q = chain.check_q(frame.q)
    if frame.dq.shape != q.shape or frame.tau_j.shape != q.shape or state.integral.shape != q.shape:
        raise InputError("frame dimensions do not match chain")
    return observer_core(
        state, mass_matrix(chain, q), bias_vector(chain, q, frame.dq), frame.tau_j, frame.dq, dt
    )


def estimate_base_wrench(chain: ChainModel, frame: SensorFrame, tau_ext_hat) -> BaseWrench:
    """Contact-induced base wrench: measured minus nominal inverse dynamics.

    The nominal acceleration reconstructs the arm's actual motion from the
    measured joint torques with the observer's external-torque estimate folded
    in, so the nominal base wrench carries the arm dynamics only and the
    subtraction isolates the contact contribution.
    """
    q = chain.check_q(frame.q)
    tau_ext_hat = _vec(tau_ext_hat, chain.n, "tau_ext_hat")
    mass_m = mass_matrix(chain, q)
    zero = np.zeros(chain.n)
    gravity_tau, _ = rnea(chain, JointState(q, zero, zero))
    coriolis, _ = rnea(chain, JointState(q, frame.dq, zero), include_gravity=False)
    ddq_nominal = np.linalg.solve(mass_m, frame.tau_j + tau_ext_hat - coriolis - gravity_tau)
    _, nominal = rnea(chain, JointState(q, frame.dq, ddq_nominal))
    measured = wrench_sensor_to_base(frame.ft_raw, chain.base_offset)
    return measured - nominal


@dataclass(frozen=True)
class MeasurementVector:
    """Stacked measurement [tau_ext_hat; base force; base moment], length n+6."""

    w_hat: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w_hat, dtype=float).reshape(-1)
        if w.shape[0] < 7:
            raise InputError("measurement vector must have length n+6 with n >= 1")
        object.__setattr__(self, "w_hat", w)

    @property
    def n(self):
        return self.w_hat.shape[0] - 6

    @property
    def tau_part(self):
        return self.w_hat[: self.n]

    @property
    def wrench_part(self):
        return self.w_hat[self.n :]


def stack_measurement(tau_ext_hat, w_base: BaseWrench) -> MeasurementVector:
    """Concatenate the torque estimate and base-wrench estimate."""
    tau = np.asarray(tau_ext_hat, dtype=float).reshape(-1)
    return MeasurementVector(np.concatenate([tau, w_base.force, w_base.moment]))


# ---------------------------------------------------------------------------
# Sensor-frame CSV (dump / replay)
# ---------------------------------------------------------------------------


def _frame_header(n):
    cols = ["t"]
    cols += [f"q{i}" for i in range(n)]
    cols += [f"dq{i}" for i in range(n)]
    cols += [f"tau{i}" for i in range(n)]
    cols += ["fx", "fy", "fz", "mx", "my", "mz"]
    return cols


def write_frames_csv(path, frames) -> None:
    """Dump sensor frames to CSV; floats keep full round-trip precision."""
    frames = list(frames)
    if not frames:
        raise InputError("no frames to write")
    n = frames[0].q.shape[0]
    with io.open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_frame_header(n))
        for f in frames:
            row = [f.t, *f.q, *f.dq, *f.tau_j, *f.ft_raw.force, *f.ft_raw.moment]
            writer.writerow([format(v, ".17g") for v in row])


def read_frames_csv(path):
    """Replay sensor frames from CSV written by :func:`write_frames_csv`."""
    with io.open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty frames file") from None
        if len(header) < 13 or (len(header) - 7) % 3 != 0:
            raise InputError(f"{path}: malformed frames header")
        n = (len(header) - 7) // 3
        if header != _frame_header(n):
            raise InputError(f"{path}: unexpected frames header")
        frames = []
        for row in reader:
            if not row:
                continue
            vals = np.array([float(v) for v in row])
            if vals.shape[0] != 7 + 3 * n:
                raise InputError(f"{path}: row with {vals.shape[0]} columns, expected {7 + 3 * n}")
            frames.append(
                SensorFrame(
                    t=float(vals[0]),
                    q=vals[1 : 1 + n],
                    dq=vals[1 + n : 1 + 2 * n],
                    tau_j=vals[1 + 2 * n : 1 + 3 * n],
                    ft_raw=BaseWrench(vals[1 + 3 * n : 4 + 3 * n], vals[4 + 3 * n : 7 + 3 * n]),
                )
            )
    if not frames:
        raise InputError(f"{path}: no frames in file")
    for a, b in zip(frames, frames[1:]):
        if b.t <= a.t:
            raise InputError(f"{path}: timestamps not strictly increasing at t={b.t}")
    return frames
