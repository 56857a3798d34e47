"""Rigid-body kinematics and dynamics of a fixed-base serial revolute chain.

All quantities are expressed in the base frame unless stated otherwise. The
base frame coincides with the mount / force-torque sensor frame by default;
an optional rigid offset can be given in the chain description file.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InputError, ValidationError

_UNIT_TOL = 1e-12


def _vec(x, size, name):
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (size,):
        raise InputError(f"{name} must have {size} entries, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite entries")
    return v


def rpy_matrix(roll, pitch, yaw):
    """Rotation matrix from roll/pitch/yaw angles (radians), R = Rz Ry Rx."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def axis_rotation(axis, angle):
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    t = 1.0 - c
    return np.array(
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    )


@dataclass(frozen=True)
class RevoluteJoint:
    """One revolute joint plus the link body it drives.

    ``axis`` is a unit vector in the joint frame, ``origin_pos``/``origin_rot``
    place the joint frame in the parent link frame. ``com`` and ``inertia``
    (about the COM) are expressed in the link frame.
    """

    axis: np.ndarray
    origin_pos: np.ndarray
    origin_rot: np.ndarray
    mass: float
    com: np.ndarray
    inertia: np.ndarray


@dataclass(frozen=True)
class ChainModel:
    """Kinematic and dynamic description of an n-joint serial arm."""

    joints: tuple
    gravity: np.ndarray
    base_offset: Optional[tuple] = None  # (rotation, translation) of sensor frame

    def __post_init__(self):
        if len(self.joints) < 1:
            raise InputError("chain needs at least one joint")
        object.__setattr__(self, "gravity", _vec(self.gravity, 3, "gravity"))
        for i, j in enumerate(self.joints):
            axis = _vec(j.axis, 3, f"joint {i + 1} axis")
            if abs(np.linalg.norm(axis) - 1.0) > _UNIT_TOL:
                raise ValidationError(f"joint {i + 1} axis is not unit-norm")
            rot = np.asarray(j.origin_rot, dtype=float)
            if rot.shape != (3, 3) or np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
                raise ValidationError(f"joint {i + 1} origin rotation is not orthonormal")
            if j.mass < 0:
                raise ValidationError(f"joint {i + 1} has negative mass")
            inertia = np.asarray(j.inertia, dtype=float)
            if inertia.shape != (3, 3) or np.max(np.abs(inertia - inertia.T)) > 1e-9:
                raise ValidationError(f"joint {i + 1} inertia is not symmetric")
            # Point masses and massless probe links are allowed, so require
            # positive semidefinite only.
            if np.linalg.eigvalsh(inertia).min() < -1e-12:
                raise ValidationError(f"joint {i + 1} inertia has negative eigenvalues")

    @property
    def n(self):
        return len(self.joints)

    def check_q(self, q, name="q"):
        return _vec(q, self.n, name)


@dataclass(frozen=True)
class JointState:
    """Position, velocity, and acceleration of every joint."""

    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "dq", _vec(self.dq, q.shape[0], "dq"))
        object.__setattr__(self, "ddq", _vec(self.ddq, q.shape[0], "ddq"))


@dataclass(frozen=True)
class BaseWrench:
    """Force and moment at the base origin, base frame."""

    force: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", _vec(self.force, 3, "force"))
        object.__setattr__(self, "moment", _vec(self.moment, 3, "moment"))

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    def as_array(self):
        return np.concatenate([self.force, self.moment])

    def __add__(self, other):
        return BaseWrench(self.force + other.force, self.moment + other.moment)

    def __sub__(self, other):
        return BaseWrench(self.force - other.force, self.moment - other.moment)


class LinkFrames(NamedTuple):
    """Pose of every link: rotations (n,3,3) and origins (n,3) in base frame."""

    rotations: np.ndarray
    origins: np.ndarray


class _FullKinematics(NamedTuple):
    rotations: np.ndarray  # (n,3,3) link frames
    origins: np.ndarray  # (n,3) joint origins
    axes: np.ndarray  # (n,3) world joint axes


def _fk_full(chain: ChainModel, q) -> _FullKinematics:
    q = chain.check_q(q)
    n = chain.n
    rots = np.empty((n, 3, 3))
    origins = np.empty((n, 3))
    axes = np.empty((n, 3))
    rot = np.eye(3)
    pos = np.zeros(3)
    for i, joint in enumerate(chain.joints):
        pos = pos + rot @ joint.origin_pos
        pre = rot @ joint.origin_rot
        axes[i] = pre @ joint.axis
        rot = pre @ axis_rotation(joint.axis, q[i])
        rots[i] = rot
        origins[i] = pos
    return _FullKinematics(rots, origins, axes)


def forward_kinematics(chain: ChainModel, q) -> LinkFrames:
    """Pose of every link for configuration ``q``.

    Frame ``i`` has its origin at joint ``i`` and rotates with link ``i``.
    """
    fk = _fk_full(chain, q)
    return LinkFrames(fk.rotations, fk.origins)


def point_jacobian(chain: ChainModel, q, link_index: int, point_world) -> np.ndarray:
    """3 x n positional Jacobian of a point rigidly attached to ``link_index``.

    Column ``i`` is ``axis_i x (point - origin_i)`` for joints at or before the
    link, zero for joints beyond it.
    """
    if not 0 <= link_index < chain.n:
        raise InputError(f"link_index {link_index} out of range [0, {chain.n})")
    point = _vec(point_world, 3, "point_world")
    fk = _fk_full(chain, q)
    jac = np.zeros((3, chain.n))
    m = link_index + 1
    jac[:, :m] = np.cross(fk.axes[:m], point[None, :] - fk.origins[:m]).T
    return jac


def rnea(
    chain: ChainModel,
    state: JointState,
    *,
    include_gravity: bool = True,
    contact_forces: Optional[Sequence] = None,
):
    """Inverse dynamics by recursive Newton-Euler.

    Returns ``(torques, base)`` where ``torques`` satisfies the equation of
    motion for the given state and ``base`` is the wrench the mount exerts on
    link 0 (gravity load included), expressed at the base origin.

    ``contact_forces`` is an optional list of ``(link_index, point, force)``
    entries following the measurement-pipeline convention: each contact
    subtracts ``J^T F`` from the returned torques and adds ``[F; r x F]`` to
    the returned base wrench.
    """
    q = chain.check_q(state.q)
    if state.dq.shape != q.shape or state.ddq.shape != q.shape:
        raise InputError("state dimensions do not match chain")
    n = chain.n
    fk = _fk_full(chain, q)

    omega = np.zeros(3)
    alpha = np.zeros(3)
    a_joint = -chain.gravity if include_gravity else np.zeros(3)
    prev_origin = np.zeros(3)

    coms = np.empty((n, 3))
    f_net = np.empty((n, 3))  # m_i * (a_ci - g), gravity folded via base accel
    n_net = np.empty((n, 3))  # moment about each COM
    for i, joint in enumerate(chain.joints):
        rot = fk.rotations[i]
        origin = fk.origins[i]
        if i > 0:
            d = origin - prev_origin
            a_joint = a_joint + np.cross(alpha, d) + np.cross(omega, np.cross(omega, d))
        axis = fk.axes[i]
        alpha = alpha + axis * state.ddq[i] + np.cross(omega, axis) * state.dq[i]
        omega = omega + axis * state.dq[i]
        com = origin + rot @ joint.com
        rc = com - origin
        a_com = a_joint + np.cross(alpha, rc) + np.cross(omega, np.cross(omega, rc))
        inertia_w = rot @ joint.inertia @ rot.T
        coms[i] = com
        f_net[i] = joint.mass * a_com
        n_net[i] = inertia_w @ alpha + np.cross(omega, inertia_w @ omega)
        prev_origin = origin

    torques = np.empty(n)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    child_origin = np.zeros(3)
    for i in range(n - 1, -1, -1):
        origin = fk.origins[i]
        f_total = f_net[i] + f_child
        n_total = (
            n_net[i]
            + np.cross(coms[i] - origin, f_net[i])
            + n_child
            + np.cross(child_origin - origin, f_child)
        )
        torques[i] = fk.axes[i] @ n_total
        f_child = f_total
        n_child = n_total
        child_origin = origin

    base_force = f_child
    base_moment = n_child + np.cross(child_origin, f_child)

    if contact_forces:
        for link_index, point, force in contact_forces:
            if not 0 <= link_index < n:
                raise InputError(f"contact link_index {link_index} out of range")
            point = _vec(point, 3, "contact point")
            force = _vec(force, 3, "contact force")
            m = link_index + 1
            # J^T F, using (axis_i x (r - o_i)) . F == axis_i . ((r - o_i) x F)
            lever = np.cross(point[None, :] - fk.origins[:m], force[None, :])
            torques[:m] -= np.einsum("ij,ij->i", fk.axes[:m], lever)
            base_force = base_force + force
            base_moment = base_moment + np.cross(point, force)

    return torques, BaseWrench(base_force, base_moment)


def mass_matrix(chain: ChainModel, q) -> np.ndarray:
    """Joint-space inertia matrix via the composite-rigid-body recursion."""
    q = chain.check_q(q)
    n = chain.n
    fk = _fk_full(chain, q)

    coms = np.empty((n, 3))
    inertias_w = np.empty((n, 3, 3))
    for i, joint in enumerate(chain.joints):
        coms[i] = fk.origins[i] + fk.rotations[i] @ joint.com
        inertias_w[i] = fk.rotations[i] @ joint.inertia @ fk.rotations[i].T

    def shifted(inertia, mass, d):
        return inertia + mass * ((d @ d) * np.eye(3) - np.outer(d, d))

    mass_m = np.zeros((n, n))
    comp_mass = 0.0
    comp_com = np.zeros(3)
    comp_inertia = np.zeros((3, 3))
    for i in range(n - 1, -1, -1):
        m_i = chain.joints[i].mass
        new_mass = comp_mass + m_i
        if new_mass > 0.0:
            new_com = (comp_mass * comp_com + m_i * coms[i]) / new_mass
        else:
            new_com = coms[i]
        comp_inertia = shifted(comp_inertia, comp_mass, comp_com - new_com) + shifted(
            inertias_w[i], m_i, coms[i] - new_com
        )
        comp_mass = new_mass
        comp_com = new_com

        axis = fk.axes[i]
        origin = fk.origins[i]
        f = comp_mass * np.cross(axis, comp_com - origin)
        n_p = comp_inertia @ axis + np.cross(comp_com - origin, f)
        mass_m[i, i] = axis @ n_p
        for j in range(i - 1, -1, -1):
            mass_m[j, i] = fk.axes[j] @ (n_p + np.cross(origin - fk.origins[j], f))
            mass_m[i, j] = mass_m[j, i]
    return mass_m


def gravity_vector(chain: ChainModel, q) -> np.ndarray:
    """Joint torques that balance gravity at rest."""
    zero = np.zeros(chain.n)
    torques, _ = rnea(chain, JointState(chain.check_q(q), zero, zero))
    return torques


def coriolis_torque(chain: ChainModel, q, dq) -> np.ndarray:
    """Velocity-product torque C(q, dq) dq."""
    torques, _ = rnea(
        chain, JointState(chain.check_q(q), _vec(dq, chain.n, "dq"), np.zeros(chain.n)),
        include_gravity=False,
    )
    return torques


def mass_matrix_dot_times_dq(chain: ChainModel, q, dq, step: float = 1e-6) -> np.ndarray:
    """dM/dt @ dq by central finite difference of M along the direction dq."""
    q = chain.check_q(q)
    dq = _vec(dq, chain.n, "dq")
    speed = np.linalg.norm(dq)
    if speed == 0.0:
        return np.zeros(chain.n)
    u = dq / speed
    dm = (mass_matrix(chain, q + step * u) - mass_matrix(chain, q - step * u)) / (2.0 * step)
    return speed * (dm @ dq)


def bias_vector(chain: ChainModel, q, dq) -> np.ndarray:
    """Momentum-observer bias term C^T(q, dq) dq - g(q).

    The transpose-Coriolis product is assembled as dM/dt dq - C dq, with the
    inertia-matrix rate taken by directional finite difference.
    """
    q = chain.check_q(q)
    dq = _vec(dq, chain.n, "dq")
    return mass_matrix_dot_times_dq(chain, q, dq) - coriolis_torque(chain, q, dq) - gravity_vector(chain, q)


def wrench_base_to_sensor(wrench: BaseWrench, offset) -> BaseWrench:
    """Re-express a base-origin wrench in the sensor frame."""
    if offset is None:
        return wrench
    rot, pos = offset
    force = rot.T @ wrench.force
    moment = rot.T @ (wrench.moment - np.cross(pos, wrench.force))
    return BaseWrench(force, moment)


def wrench_sensor_to_base(wrench: BaseWrench, offset) -> BaseWrench:
    """Inverse of :func:`wrench_base_to_sensor`."""
    if offset is None:
        return wrench
    rot, pos = offset
    force = rot @ wrench.force
    moment = rot @ wrench.moment + np.cross(pos, force)
    return BaseWrench(force, moment)


# ---------------------------------------------------------------------------
# Chain description file
# ---------------------------------------------------------------------------

_CHAIN_KEYS = {"gravity"}
_OFFSET_KEYS = {"origin_xyz", "origin_rpy"}
_JOINT_KEYS = {"axis", "origin_xyz", "origin_rpy", "mass", "com", "inertia"}


def _floats(text, count, name):
    parts = text.split()
    if len(parts) != count:
        raise InputError(f"{name} must have {count} numbers, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from None


def parse_chain(text: str) -> ChainModel:
    """Parse a chain description (INI key-value tree). Unknown keys rejected.

    Layout::

        [chain]
        gravity = 0 0 -9.81

        [base_offset]          ; optional sensor-frame offset
        origin_xyz = 0 0 0
        origin_rpy = 0 0 0

        [joint1]
        axis = 0 0 1           ; unit vector, joint frame
        origin_xyz = 0 0 0.1   ; meters, parent link frame
        origin_rpy = 0 0 0     ; radians
        mass = 3.5             ; kg
        com = 0 0 0.07         ; meters, link frame
        inertia = ixx ixy ixz iyy iyz izz   ; kg m^2 about the COM, link frame
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"chain file: {exc}") from None

    sections = set(parser.sections())
    if "chain" not in sections:
        raise InputError("chain file: missing [chain] section")
    joint_names = sorted(s for s in sections if s.startswith("joint"))
    extra = sections - {"chain", "base_offset"} - set(joint_names)
    if extra:
        raise InputError(f"chain file: unknown sections {sorted(extra)}")

    for key in parser["chain"]:
        if key not in _CHAIN_KEYS:
            raise InputError(f"chain file: unknown key '{key}' in [chain]")
    gravity = _floats(parser["chain"].get("gravity", "0 0 -9.81"), 3, "gravity")

    base_offset = None
    if "base_offset" in sections:
        for key in parser["base_offset"]:
            if key not in _OFFSET_KEYS:
                raise InputError(f"chain file: unknown key '{key}' in [base_offset]")
        xyz = _floats(parser["base_offset"].get("origin_xyz", "0 0 0"), 3, "base_offset origin_xyz")
        rpy = _floats(parser["base_offset"].get("origin_rpy", "0 0 0"), 3, "base_offset origin_rpy")
        base_offset = (rpy_matrix(*rpy), xyz)

    n = len(joint_names)
    expected = [f"joint{i + 1}" for i in range(n)]
    if joint_names != sorted(expected):
        raise InputError(f"chain file: joints must be named joint1..joint{n}")

    joints = []
    for name in expected:
        sec = parser[name]
        for key in sec:
            if key not in _JOINT_KEYS:
                raise InputError(f"chain file: unknown key '{key}' in [{name}]")
        for key in ("axis", "mass", "inertia"):
            if key not in sec:
                raise InputError(f"chain file: [{name}] missing '{key}'")
        axis = _floats(sec["axis"], 3, f"{name} axis")
        xyz = _floats(sec.get("origin_xyz", "0 0 0"), 3, f"{name} origin_xyz")
        rpy = _floats(sec.get("origin_rpy", "0 0 0"), 3, f"{name} origin_rpy")
        mass = float(sec["mass"])
        com = _floats(sec.get("com", "0 0 0"), 3, f"{name} com")
        ine = _floats(sec["inertia"], 6, f"{name} inertia")
        inertia = np.array(
            [
                [ine[0], ine[1], ine[2]],
                [ine[1], ine[3], ine[4]],
                [ine[2], ine[4], ine[5]],
            ]
        )
        joints.append(
            RevoluteJoint(
                axis=axis,
                origin_pos=xyz,
                origin_rot=rpy_matrix(*rpy),
                mass=mass,
                com=com,
                inertia=inertia,
            )
        )
    return ChainModel(joints=tuple(joints), gravity=gravity, base_offset=base_offset)


def load_chain(path) -> ChainModel:
    """Load a chain description file."""
    with io.open(path, "r", encoding="utf-8") as handle:
        return parse_chain(handle.read())
