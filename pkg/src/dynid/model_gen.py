"""Procedural generation of serial-manipulator models.

All robots produced in one run share a fixed kinematic template (joint axes,
joint offsets, link lengths) while their dynamic make-up varies: link
cross-section shape, diameter, density-derived mass, center-of-mass position,
and per-joint Coulomb/viscous friction coefficients.

Frame conventions used throughout the toolkit:

* Link ``i`` (1-based) is attached to its parent by revolute joint ``i``. The
  link frame coincides with the joint frame; the link body extends along the
  local +z axis from ``z = 0`` to ``z = length``.
* ``com_offset`` displaces the center of mass along local z from the
  geometric center ``length / 2``.
* Inertia tensors are diagonal in the link frame and expressed at the COM;
  z is the axial direction.
"""

from __future__ import annotations

import io
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, InvalidModelError, RangeError, UrdfParseError, UrdfUnsupportedError

CYLINDER = "cylinder"
BOX = "box"

#: Version of the identifiable-parameter ordering below.
PARAM_LAYOUT_VERSION = 1


@dataclass(frozen=True)
class KinematicTemplate:
    """Fixed kinematic skeleton shared by every robot in a generation run."""

    joint_axes: tuple[tuple[float, float, float], ...]
    joint_origins: tuple[tuple[float, float, float], ...]   # translation in parent frame (m)
    joint_rpy: tuple[tuple[float, float, float], ...]       # fixed rotation, roll-pitch-yaw (rad)
    joint_limits: tuple[tuple[float, float], ...]           # (lower, upper) in rad
    link_lengths: tuple[float, ...]                         # along each link's +z axis (m)

    @property
    def n_joints(self) -> int:
        return len(self.joint_axes)

    def validate(self) -> None:
        n = self.n_joints
        if not (len(self.joint_origins) == len(self.joint_rpy) == len(self.joint_limits)
                == len(self.link_lengths) == n):
            raise InvalidModelError("template field lengths disagree")
        if n != 6:
            raise InvalidModelError(f"template must define exactly 6 joints, got {n}")
        for i, axis in enumerate(self.joint_axes):
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise InvalidModelError(f"joint {i} axis is not unit-norm")
        for i, (lo, hi) in enumerate(self.joint_limits):
            if not lo < hi:
                raise InvalidModelError(f"joint {i} limits are not ordered")
        for i, length in enumerate(self.link_lengths):
            if not length > 0.0:
                raise InvalidModelError(f"link {i + 1} length must be positive")


#: Anthropomorphic 6-DOF default: base yaw column, shoulder/elbow pitch, and
#: a pitch/yaw/pitch wrist. At q = 0 the arm points straight up. Every wrist
#: axis is transverse to its link so each joint sees lever-arm inertia from
#: the distal chain; on-axis roll joints would leave featherweight links
#: facing newton-meter-scale friction and control torques.
DEFAULT_TEMPLATE = KinematicTemplate(
    joint_axes=((0, 0, 1), (0, 1, 0), (0, 1, 0), (0, 1, 0), (1, 0, 0), (0, 1, 0)),
    joint_origins=((0, 0, 0), (0, 0, 0.30), (0, 0, 0.35), (0, 0, 0.30), (0, 0, 0.12), (0, 0, 0.10)),
    joint_rpy=((0, 0, 0),) * 6,
    joint_limits=((-math.pi, math.pi), (-2.2, 2.2), (-2.5, 2.5),
                  (-2.5, 2.5), (-2.0, 2.0), (-2.8, 2.8)),
    link_lengths=(0.30, 0.35, 0.30, 0.12, 0.10, 0.08),
)


@dataclass(frozen=True)
class LinkSpec:
    shape: str                       # CYLINDER or BOX
    diameter: float                  # cylinder diameter or box side (m)
    length: float                    # along local z (m)
    mass: float                      # kg
    com_offset: float                # signed COM shift along z from length/2 (m)
    inertia: tuple[float, float, float]   # (Ixx, Iyy, Izz) at COM, link frame (kg m^2)

    def validate(self) -> None:
        if self.shape not in (CYLINDER, BOX):
            raise InvalidModelError(f"unknown link shape {self.shape!r}")
        if not (self.mass > 0 and self.diameter > 0 and self.length > 0):
            raise InvalidModelError("link mass, diameter and length must be positive")
        if abs(self.com_offset) > self.length / 2 + 1e-12:
            raise InvalidModelError("com_offset exceeds half the link length")
        ixx, iyy, izz = self.inertia
        if not (ixx > 0 and iyy > 0 and izz > 0):
            raise InvalidModelError("inertia diagonal must be strictly positive")
        if ixx > iyy + izz + 1e-12 or iyy > ixx + izz + 1e-12 or izz > ixx + iyy + 1e-12:
            raise InvalidModelError("inertia diagonal violates the triangle inequalities")


@dataclass(frozen=True)
class JointSpec:
    mu_c: float    # Coulomb friction coefficient (N m)
    mu_v: float    # viscous friction coefficient (N m s/rad)

    def validate(self) -> None:
        if self.mu_c < 0 or self.mu_v < 0:
            raise InvalidModelError("friction coefficients must be non-negative")


@dataclass(frozen=True)
class RobotModel:
    id: int
    template: KinematicTemplate
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    generation_seed: int

    def validate(self) -> None:
        self.template.validate()
        if len(self.links) != self.template.n_joints or len(self.joints) != self.template.n_joints:
            raise InvalidModelError("link/joint count does not match the template")
        for i, (link, length) in enumerate(zip(self.links, self.template.link_lengths)):
            link.validate()
            if abs(link.length - length) > 1e-12:
                raise InvalidModelError(f"link {i + 1} length disagrees with the template")
        for joint in self.joints:
            joint.validate()


@dataclass(frozen=True)
class VariationRanges:
    """Closed intervals for every varied property plus the admissible shapes."""

    diameter: tuple[float, float] = (0.04, 0.12)
    com_offset_frac: tuple[float, float] = (-0.2, 0.2)   # fraction of link length
    mu_c: tuple[float, float] = (0.0, 0.5)
    mu_v: tuple[float, float] = (0.0, 0.5)
    density: tuple[float, float] = (500.0, 3000.0)       # kg/m^3, mass = density * volume
    shapes: tuple[str, ...] = (CYLINDER, BOX)

    def validate(self) -> None:
        for name in ("diameter", "com_offset_frac", "mu_c", "mu_v", "density"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise RangeError(f"range {name} must satisfy min <= max with finite bounds")
        if self.diameter[0] <= 0:
            raise RangeError("diameter range must be strictly positive")
        if self.density[0] <= 0:
            raise RangeError("density range must be strictly positive")
        if self.mu_c[0] < 0 or self.mu_v[0] < 0:
            raise RangeError("friction ranges must be non-negative")
        if not -0.5 <= self.com_offset_frac[0] <= self.com_offset_frac[1] <= 0.5:
            raise RangeError("com_offset_frac must lie within [-0.5, 0.5]")
        if not self.shapes:
            raise RangeError("shapes must not be empty")
        for shape in self.shapes:
            if shape not in (CYLINDER, BOX):
                raise RangeError(f"unknown shape {shape!r} in shapes")


def compute_link_inertia(shape: str, diameter: float, length: float, mass: float,
                         com_offset: float = 0.0) -> tuple[float, float, float]:
    """COM-frame principal inertia (Ixx, Iyy, Izz) of a solid link, z axial.

    The COM offset does not enter: COM-frame inertia of a uniform solid is
    independent of where the COM sits relative to the joint; offsets are
    handled by the dynamics module via parallel-axis terms.
    """
    # length 0 is tolerated as the analytic thin-disc/plate limit
    if not (mass > 0 and diameter > 0 and length >= 0):
        raise DomainError("mass and diameter must be positive, length non-negative")
    if shape == CYLINDER:
        r = diameter / 2
        axial = 0.5 * mass * r * r
        transverse = mass * (3 * r * r + length * length) / 12.0
    elif shape == BOX:
        d = diameter
        axial = mass * (d * d + d * d) / 12.0
        transverse = mass * (d * d + length * length) / 12.0
    else:
        raise DomainError(f"unknown shape {shape!r}")
    return (transverse, transverse, axial)


def link_volume(shape: str, diameter: float, length: float) -> float:
    if shape == CYLINDER:
        return math.pi * (diameter / 2) ** 2 * length
    if shape == BOX:
        return diameter * diameter * length
    raise DomainError(f"unknown shape {shape!r}")


def generate_robot(seed: int, template: KinematicTemplate = DEFAULT_TEMPLATE,
                   ranges: VariationRanges = VariationRanges(), robot_id: int | None = None) -> RobotModel:
    """Draw one robot. Pure function of (seed, template, ranges)."""
    template.validate()
    ranges.validate()
    rng = np.random.default_rng(seed)
    links = []
    for length in template.link_lengths:
        shape = ranges.shapes[int(rng.integers(len(ranges.shapes)))]
        diameter = float(rng.uniform(*ranges.diameter))
        density = float(rng.uniform(*ranges.density))
        com_frac = float(rng.uniform(*ranges.com_offset_frac))
        mass = density * link_volume(shape, diameter, length)
        inertia = compute_link_inertia(shape, diameter, length, mass)
        links.append(LinkSpec(shape=shape, diameter=diameter, length=length, mass=mass,
                              com_offset=com_frac * length, inertia=inertia))
    joints = [JointSpec(mu_c=float(rng.uniform(*ranges.mu_c)), mu_v=float(rng.uniform(*ranges.mu_v)))
              for _ in range(template.n_joints)]
    model = RobotModel(id=seed if robot_id is None else robot_id, template=template,
                       links=tuple(links), joints=tuple(joints), generation_seed=seed)
    model.validate()
    return model


# --------------------------------------------------------------------------
# Identifiable-parameter vector
#
# Link 1 rotates about the vertical base axis only, so its mass, COM and
# transverse inertia never influence joint torques; only its Izz is listed.

def param_names() -> list[str]:
    names = [f"mu_c[J{i}]" for i in range(6)]
    names += [f"mu_v[J{i}]" for i in range(6)]
    names += [f"mass[L{i}]" for i in range(2, 7)]
    names += [f"com[L{i}]" for i in range(2, 7)]
    names += ["Izz[L1]"]
    for i in range(2, 7):
        names += [f"Ixx[L{i}]", f"Iyy[L{i}]", f"Izz[L{i}]"]
    return names


PARAM_NAMES = param_names()


def param_vector(model: RobotModel) -> np.ndarray:
    """Raw (un-normalized) 38-entry vector of identifiable dynamic parameters."""
    vals = [j.mu_c for j in model.joints]
    vals += [j.mu_v for j in model.joints]
    vals += [link.mass for link in model.links[1:]]
    vals += [link.com_offset for link in model.links[1:]]
    vals += [model.links[0].inertia[2]]
    for link in model.links[1:]:
        vals += list(link.inertia)
    return np.asarray(vals, dtype=np.float64)


def param_bounds(template: KinematicTemplate, ranges: VariationRanges) -> tuple[np.ndarray, np.ndarray]:
    """Exact min/max attainable for each param_vector entry under ``ranges``.

    Mass and inertia are monotone in diameter and density for both shapes, so
    the extremes are realized at interval corners over the admissible shapes.
    """
    ranges.validate()
    d_lo, d_hi = ranges.diameter
    rho_lo, rho_hi = ranges.density

    def mass_extremes(length: float) -> tuple[float, float]:
        vols_lo = [link_volume(s, d_lo, length) for s in ranges.shapes]
        vols_hi = [link_volume(s, d_hi, length) for s in ranges.shapes]
        return rho_lo * min(vols_lo), rho_hi * max(vols_hi)

    def inertia_extremes(length: float, index: int) -> tuple[float, float]:
        los, his = [], []
        for shape in ranges.shapes:
            m_lo = rho_lo * link_volume(shape, d_lo, length)
            m_hi = rho_hi * link_volume(shape, d_hi, length)
            los.append(compute_link_inertia(shape, d_lo, length, m_lo)[index])
            his.append(compute_link_inertia(shape, d_hi, length, m_hi)[index])
        return min(los), max(his)

    lengths = template.link_lengths
    lo, hi = [], []
    for bound in (ranges.mu_c,) * 6 + (ranges.mu_v,) * 6:
        lo.append(bound[0])
        hi.append(bound[1])
    for length in lengths[1:]:
        m0, m1 = mass_extremes(length)
        lo.append(m0)
        hi.append(m1)
    for length in lengths[1:]:
        lo.append(ranges.com_offset_frac[0] * length)
        hi.append(ranges.com_offset_frac[1] * length)
    izz0 = inertia_extremes(lengths[0], 2)
    lo.append(izz0[0])
    hi.append(izz0[1])
    for length in lengths[1:]:
        for index in range(3):
            b = inertia_extremes(length, index)
            lo.append(b[0])
            hi.append(b[1])
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


# --------------------------------------------------------------------------
# URDF subset serialization

def _fmt(x: float) -> str:
    # shortest representation that round-trips exactly
    return repr(float(x))


def serialize_urdf(model: RobotModel) -> str:
    """Emit the URDF subset: 7 links (fixed base + 6), 6 revolute joints.

    Friction follows standard URDF dynamics-tag semantics: damping carries
    the viscous coefficient, friction the Coulomb coefficient. The extra
    ``generation`` element records the seed so parsing is a full inverse.
    """
    robot = ET.Element("robot", name=f"robot_{model.id}")
    ET.SubElement(robot, "generation", seed=str(model.generation_seed))
    ET.SubElement(robot, "link", name="base_link")
    for i, link in enumerate(model.links, start=1):
        el = ET.SubElement(robot, "link", name=f"link_{i}")
        inertial = ET.SubElement(el, "inertial")
        com_z = link.length / 2 + link.com_offset
        ET.SubElement(inertial, "origin", xyz=f"0 0 {_fmt(com_z)}", rpy="0 0 0")
        ET.SubElement(inertial, "mass", value=_fmt(link.mass))
        ixx, iyy, izz = link.inertia
        ET.SubElement(inertial, "inertia", ixx=_fmt(ixx), iyy=_fmt(iyy), izz=_fmt(izz),
                      ixy="0", ixz="0", iyz="0")
        visual = ET.SubElement(el, "visual")
        ET.SubElement(visual, "origin", xyz=f"0 0 {_fmt(link.length / 2)}", rpy="0 0 0")
        geometry = ET.SubElement(visual, "geometry")
        if link.shape == CYLINDER:
            ET.SubElement(geometry, "cylinder", radius=_fmt(link.diameter / 2), length=_fmt(link.length))
        else:
            ET.SubElement(geometry, "box", size=f"{_fmt(link.diameter)} {_fmt(link.diameter)} {_fmt(link.length)}")
    t = model.template
    for i in range(t.n_joints):
        joint = ET.SubElement(robot, "joint", name=f"joint_{i + 1}", type="revolute")
        px, py, pz = t.joint_origins[i]
        rr, rp, ry = t.joint_rpy[i]
        ET.SubElement(joint, "origin", xyz=f"{_fmt(px)} {_fmt(py)} {_fmt(pz)}",
                      rpy=f"{_fmt(rr)} {_fmt(rp)} {_fmt(ry)}")
        ET.SubElement(joint, "parent", link="base_link" if i == 0 else f"link_{i}")
        ET.SubElement(joint, "child", link=f"link_{i + 1}")
        ax, ay, az = t.joint_axes[i]
        ET.SubElement(joint, "axis", xyz=f"{_fmt(ax)} {_fmt(ay)} {_fmt(az)}")
        lo, hi = t.joint_limits[i]
        ET.SubElement(joint, "limit", lower=_fmt(lo), upper=_fmt(hi), effort="1000", velocity="100")
        ET.SubElement(joint, "dynamics", damping=_fmt(model.joints[i].mu_v),
                      friction=_fmt(model.joints[i].mu_c))
    ET.indent(robot)
    return ET.tostring(robot, encoding="unicode", xml_declaration=True) + "\n"


def _attr(el: ET.Element, name: str) -> str:
    value = el.get(name)
    if value is None:
        raise UrdfParseError(f"element <{el.tag}> is missing attribute {name!r}")
    return value


def _floats(text: str, count: int, where: str) -> tuple[float, ...]:
    parts = text.split()
    if len(parts) != count:
        raise UrdfParseError(f"{where}: expected {count} numbers, got {len(parts)}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UrdfParseError(f"{where}: {exc}") from exc


def _float(text: str, where: str) -> float:
    return _floats(text, 1, where)[0]


def _child(el: ET.Element, tag: str) -> ET.Element:
    found = el.find(tag)
    if found is None:
        raise UrdfParseError(f"element <{el.tag}> is missing child <{tag}>")
    return found


def parse_urdf(text: str) -> RobotModel:
    """Parse a document produced by :func:`serialize_urdf` (or equivalent).

    Rejects anything outside the subset: non-revolute joints, missing
    inertial blocks, non-diagonal inertia, unknown geometry primitives.
    """
    try:
        robot = ET.parse(io.StringIO(text)).getroot()
    except ET.ParseError as exc:
        raise UrdfParseError(f"malformed XML: {exc.msg if hasattr(exc, 'msg') else exc}",
                             position=getattr(exc, "position", None)) from exc
    if robot.tag != "robot":
        raise UrdfUnsupportedError(f"root element must be <robot>, got <{robot.tag}>")

    name = robot.get("name", "")
    try:
        robot_id = int(name.rsplit("_", 1)[1]) if "_" in name else 0
    except ValueError:
        robot_id = 0
    gen = robot.find("generation")
    try:
        seed = int(gen.get("seed", "0")) if gen is not None else 0
    except ValueError as exc:
        raise UrdfParseError(f"generation seed: {exc}") from exc

    link_els = robot.findall("link")
    joint_els = robot.findall("joint")
    if len(link_els) < 2:
        raise UrdfUnsupportedError("document must contain a base link and at least one moving link")
    if len(joint_els) != len(link_els) - 1:
        raise UrdfUnsupportedError("document must describe a serial chain "
                                   f"({len(link_els)} links, {len(joint_els)} joints)")
    for tag in ("gazebo", "transmission", "sensor", "mimic"):
        if robot.find(tag) is not None:
            raise UrdfUnsupportedError(f"unsupported element <{tag}>")

    links = []
    for el in link_els[1:]:
        inertial = el.find("inertial")
        if inertial is None:
            raise UrdfUnsupportedError(f"link {el.get('name')!r} has no inertial block")
        origin = _child(inertial, "origin")
        ox, oy, oz = _floats(_attr(origin, "xyz"), 3, "inertial origin")
        if abs(ox) > 1e-12 or abs(oy) > 1e-12:
            raise UrdfUnsupportedError("inertial origin must lie on the link z axis")
        mass = _float(_attr(_child(inertial, "mass"), "value"), "mass")
        inertia_el = _child(inertial, "inertia")
        for off_diag in ("ixy", "ixz", "iyz"):
            if abs(_float(inertia_el.get(off_diag, "0"), off_diag)) > 0.0:
                raise UrdfUnsupportedError("non-diagonal inertia tensors are not supported")
        inertia = tuple(_float(_attr(inertia_el, k), k) for k in ("ixx", "iyy", "izz"))
        geometry = _child(_child(el, "visual"), "geometry")
        shapes = list(geometry)
        if len(shapes) != 1:
            raise UrdfUnsupportedError("visual geometry must contain exactly one primitive")
        geo = shapes[0]
        if geo.tag == "cylinder":
            shape = CYLINDER
            diameter = 2 * _float(_attr(geo, "radius"), "cylinder radius")
            length = _float(_attr(geo, "length"), "cylinder length")
        elif geo.tag == "box":
            shape = BOX
            sx, sy, sz = _floats(_attr(geo, "size"), 3, "box size")
            if abs(sx - sy) > 1e-12:
                raise UrdfUnsupportedError("box links must have a square cross-section")
            diameter, length = sx, sz
        else:
            raise UrdfUnsupportedError(f"unsupported geometry primitive <{geo.tag}>")
        links.append(LinkSpec(shape=shape, diameter=diameter, length=length, mass=mass,
                              com_offset=oz - length / 2, inertia=inertia))

    axes, origins, rpys, limits, joints = [], [], [], [], []
    for el in joint_els:
        jtype = el.get("type", "")
        if jtype != "revolute":
            raise UrdfUnsupportedError(f"unsupported joint type {jtype!r} (joint {el.get('name')!r})")
        origin = _child(el, "origin")
        origins.append(_floats(_attr(origin, "xyz"), 3, "joint origin xyz"))
        rpys.append(_floats(_attr(origin, "rpy"), 3, "joint origin rpy"))
        axes.append(_floats(_attr(_child(el, "axis"), "xyz"), 3, "joint axis"))
        limit = _child(el, "limit")
        limits.append((_float(_attr(limit, "lower"), "limit lower"),
                       _float(_attr(limit, "upper"), "limit upper")))
        dynamics = _child(el, "dynamics")
        joints.append(JointSpec(mu_c=_float(_attr(dynamics, "friction"), "friction"),
                                mu_v=_float(_attr(dynamics, "damping"), "damping")))

    template = KinematicTemplate(joint_axes=tuple(axes), joint_origins=tuple(origins),
                                 joint_rpy=tuple(rpys), joint_limits=tuple(limits),
                                 link_lengths=tuple(link.length for link in links))
    model = RobotModel(id=robot_id, template=template, links=tuple(links),
                       joints=tuple(joints), generation_seed=seed)
    model.validate()
    return model


def template_to_dict(template: KinematicTemplate) -> dict:
    return {
        "joint_axes": [list(a) for a in template.joint_axes],
        "joint_origins": [list(p) for p in template.joint_origins],
        "joint_rpy": [list(r) for r in template.joint_rpy],
        "joint_limits": [list(l) for l in template.joint_limits],
        "link_lengths": list(template.link_lengths),
    }


def template_from_dict(data: dict) -> KinematicTemplate:
    return KinematicTemplate(
        joint_axes=tuple(tuple(a) for a in data["joint_axes"]),
        joint_origins=tuple(tuple(p) for p in data["joint_origins"]),
        joint_rpy=tuple(tuple(r) for r in data["joint_rpy"]),
        joint_limits=tuple(tuple(l) for l in data["joint_limits"]),
        link_lengths=tuple(data["link_lengths"]),
    )


# --------------------------------------------------------------------------
# Generation manifest (one JSON record per line; header first)

def write_manifest(path, models: list[RobotModel], ranges: VariationRanges,
                   template: KinematicTemplate = DEFAULT_TEMPLATE) -> None:
    header = {
        "record": "header",
        "version": 1,
        "param_layout": PARAM_LAYOUT_VERSION,
        "param_names": PARAM_NAMES,
        "template": template_to_dict(template),
        "ranges": {
            "diameter": list(ranges.diameter),
            "com_offset_frac": list(ranges.com_offset_frac),
            "mu_c": list(ranges.mu_c),
            "mu_v": list(ranges.mu_v),
            "density": list(ranges.density),
            "shapes": list(ranges.shapes),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for model in models:
            record = {"record": "robot", "id": model.id, "seed": model.generation_seed,
                      "params": param_vector(model).tolist()}
            fh.write(json.dumps(record) + "\n")


def read_manifest(path) -> tuple[dict, dict[int, dict]]:
    """Return (header, {robot_id: record})."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise InvalidModelError(f"manifest {path} has no header record")
    header = lines[0]
    if header.get("param_layout") != PARAM_LAYOUT_VERSION:
        raise InvalidModelError("manifest parameter layout version mismatch")
    robots = {}
    for record in lines[1:]:
        if record.get("record") != "robot":
            continue
        record["params"] = np.asarray(record["params"], dtype=np.float64)
        robots[int(record["id"])] = record
    return header, robots


def ranges_from_manifest(header: dict) -> VariationRanges:
    r = header["ranges"]
    return VariationRanges(diameter=tuple(r["diameter"]), com_offset_frac=tuple(r["com_offset_frac"]),
                           mu_c=tuple(r["mu_c"]), mu_v=tuple(r["mu_v"]),
                           density=tuple(r["density"]), shapes=tuple(r["shapes"]))
