import math

import numpy as np
import pytest

from dynid import model_gen as mg
from conftest import assert_models_close
from dynid.errors import DomainError, InvalidModelError, RangeError, UrdfParseError, UrdfUnsupportedError


class TestComputeLinkInertia:
    def test_degenerate_disc(self):
        # thin disc limit: axial = m r^2 / 2, transverse = m r^2 / 4
        ixx, iyy, izz = mg.compute_link_inertia(mg.CYLINDER, diameter=2.0, length=0.0, mass=1.0)
        assert izz == pytest.approx(0.5, abs=1e-15)
        assert ixx == pytest.approx(0.25, abs=1e-15)
        assert iyy == ixx

    def test_cylinder_closed_form(self):
        # m (3 r^2 + L^2) / 12 evaluated independently
        ixx, iyy, izz = mg.compute_link_inertia(mg.CYLINDER, diameter=0.1, length=0.4, mass=2.0)
        expected = 2.0 * (3 * 0.05 ** 2 + 0.4 ** 2) / 12
        assert ixx == pytest.approx(expected, rel=1e-15)
        assert expected == pytest.approx(0.0279166666666666, rel=1e-12)
        assert izz == pytest.approx(0.5 * 2.0 * 0.05 ** 2, rel=1e-15)

    def test_cube_symmetry(self):
        vals = mg.compute_link_inertia(mg.BOX, diameter=0.1, length=0.1, mass=1.0)
        assert vals == pytest.approx((1.0 * (0.01 + 0.01) / 12,) * 3, rel=1e-15)

    def test_rejects_bad_geometry(self):
        with pytest.raises(DomainError):
            mg.compute_link_inertia(mg.CYLINDER, diameter=-0.1, length=0.4, mass=1.0)
        with pytest.raises(DomainError):
            mg.compute_link_inertia(mg.BOX, diameter=0.1, length=0.4, mass=0.0)

    @pytest.mark.parametrize("shape", [mg.CYLINDER, mg.BOX])
    def test_against_monte_carlo_volume_integral(self, shape):
        # independent oracle: sample the solid uniformly and integrate r^2 terms
        rng = np.random.default_rng(123)
        for _ in range(4):
            diameter = rng.uniform(0.05, 0.3)
            length = rng.uniform(0.1, 0.6)
            mass = rng.uniform(0.5, 4.0)
            n = 400_000
            if shape == mg.CYLINDER:
                r = diameter / 2 * np.sqrt(rng.random(n))
                theta = rng.uniform(0, 2 * np.pi, n)
                x, y = r * np.cos(theta), r * np.sin(theta)
            else:
                x = rng.uniform(-diameter / 2, diameter / 2, n)
                y = rng.uniform(-diameter / 2, diameter / 2, n)
            z = rng.uniform(-length / 2, length / 2, n)
            mc = mass * np.array([np.mean(y * y + z * z), np.mean(x * x + z * z),
                                  np.mean(x * x + y * y)])
            analytic = mg.compute_link_inertia(shape, diameter, length, mass)
            np.testing.assert_allclose(analytic, mc, rtol=0.01)


class TestGenerateRobot:
    def test_deterministic(self, default_ranges):
        a = mg.generate_robot(seed=7, ranges=default_ranges)
        b = mg.generate_robot(seed=7, ranges=default_ranges)
        assert a == b

    def test_degenerate_interval_pins_value(self):
        ranges = mg.VariationRanges(mu_c=(0.1, 0.1))
        model = mg.generate_robot(seed=3, ranges=ranges)
        assert all(j.mu_c == 0.1 for j in model.joints)

    def test_distinct_seeds_distinct_params(self):
        vectors = [mg.param_vector(mg.generate_robot(seed=s)) for s in range(64)]
        stacked = np.stack(vectors)
        assert len({tuple(v) for v in stacked}) == 64

    def test_invalid_ranges_rejected(self):
        with pytest.raises(RangeError):
            mg.generate_robot(seed=0, ranges=mg.VariationRanges(diameter=(0.2, 0.1)))
        with pytest.raises(RangeError):
            mg.generate_robot(seed=0, ranges=mg.VariationRanges(density=(-5, 10)))

    def test_mass_follows_density_times_volume(self, robot):
        for link in robot.links:
            volume = mg.link_volume(link.shape, link.diameter, link.length)
            density = link.mass / volume
            assert 500.0 <= density <= 3000.0

    def test_generated_links_satisfy_invariants(self):
        # property test over many random generations
        for seed in range(10_000):
            model = mg.generate_robot(seed=seed)
            for link in model.links:
                ixx, iyy, izz = link.inertia
                assert ixx > 0 and iyy > 0 and izz > 0
                assert ixx <= iyy + izz + 1e-12
                assert iyy <= ixx + izz + 1e-12
                assert izz <= ixx + iyy + 1e-12
                assert abs(link.com_offset) <= link.length / 2
                assert link.mass > 0

    def test_param_vector_layout(self, robot):
        vec = mg.param_vector(robot)
        assert vec.shape == (38,)
        assert len(mg.PARAM_NAMES) == 38
        assert vec[0] == robot.joints[0].mu_c
        assert vec[6] == robot.joints[0].mu_v
        assert vec[12] == robot.links[1].mass
        assert vec[17] == robot.links[1].com_offset
        assert vec[22] == robot.links[0].inertia[2]
        assert vec[23] == robot.links[1].inertia[0]

    def test_param_bounds_cover_generated_values(self, default_ranges):
        lo, hi = mg.param_bounds(mg.DEFAULT_TEMPLATE, default_ranges)
        assert lo.shape == hi.shape == (38,)
        assert (lo <= hi).all()
        for seed in range(500):
            vec = mg.param_vector(mg.generate_robot(seed=seed))
            assert (vec >= lo - 1e-12).all() and (vec <= hi + 1e-12).all()


class TestTemplate:
    def test_default_template_valid(self):
        mg.DEFAULT_TEMPLATE.validate()
        for axis in mg.DEFAULT_TEMPLATE.joint_axes:
            assert abs(np.linalg.norm(axis) - 1.0) < 1e-9

    def test_template_dict_round_trip(self):
        data = mg.template_to_dict(mg.DEFAULT_TEMPLATE)
        assert mg.template_from_dict(data) == mg.DEFAULT_TEMPLATE

    def test_wrong_joint_count_rejected(self):
        bad = mg.KinematicTemplate(joint_axes=((0, 0, 1),), joint_origins=((0, 0, 0),),
                                   joint_rpy=((0, 0, 0),), joint_limits=((-1, 1),),
                                   link_lengths=(0.3,))
        with pytest.raises(InvalidModelError):
            bad.validate()


class TestUrdf:
    def test_structure(self, robot):
        import xml.etree.ElementTree as ET
        doc = ET.fromstring(mg.serialize_urdf(robot))
        assert doc.tag == "robot"
        assert len(doc.findall("link")) == 7
        assert len(doc.findall("joint")) == 6
        for joint in doc.findall("joint"):
            assert joint.get("type") == "revolute"

    def test_damping_attribute_carries_viscous_coefficient(self, robot):
        import xml.etree.ElementTree as ET
        doc = ET.fromstring(mg.serialize_urdf(robot))
        dynamics = doc.findall("joint")[2].find("dynamics")
        assert float(dynamics.get("damping")) == pytest.approx(robot.joints[2].mu_v, rel=1e-15)
        assert float(dynamics.get("friction")) == pytest.approx(robot.joints[2].mu_c, rel=1e-15)

    def test_round_trip_identity(self):
        for seed in range(50):
            model = mg.generate_robot(seed=seed, robot_id=seed)
            restored = mg.parse_urdf(mg.serialize_urdf(model))
            assert_models_close(restored, model, rtol=1e-12)

    def test_prismatic_joint_rejected(self, robot):
        text = mg.serialize_urdf(robot).replace('type="revolute"', 'type="prismatic"', 1)
        with pytest.raises(UrdfUnsupportedError, match="prismatic"):
            mg.parse_urdf(text)

    def test_truncated_document_is_parse_error(self, robot):
        text = mg.serialize_urdf(robot)
        with pytest.raises(UrdfParseError):
            mg.parse_urdf(text[: len(text) // 2])

    def test_parse_error_carries_position(self):
        try:
            mg.parse_urdf("<robot><link></robot>")
        except UrdfParseError as exc:
            assert exc.position is not None
        else:
            pytest.fail("expected UrdfParseError")

    def test_non_diagonal_inertia_rejected(self, robot):
        text = mg.serialize_urdf(robot).replace('ixy="0"', 'ixy="0.01"', 1)
        with pytest.raises(UrdfUnsupportedError, match="diagonal"):
            mg.parse_urdf(text)

    def test_missing_inertial_rejected(self, robot):
        import re
        text = re.sub(r"<inertial>.*?</inertial>", "", mg.serialize_urdf(robot),
                      count=1, flags=re.S)
        with pytest.raises(UrdfUnsupportedError, match="inertial"):
            mg.parse_urdf(text)


class TestManifest:
    def test_round_trip(self, tmp_path, default_ranges):
        models = [mg.generate_robot(seed=s, robot_id=s) for s in range(5)]
        path = tmp_path / "manifest.jsonl"
        mg.write_manifest(path, models, default_ranges)
        header, records = mg.read_manifest(path)
        assert header["param_names"] == mg.PARAM_NAMES
        assert mg.template_from_dict(header["template"]) == mg.DEFAULT_TEMPLATE
        assert set(records) == set(range(5))
        np.testing.assert_array_equal(records[3]["params"], mg.param_vector(models[3]))
        restored = mg.ranges_from_manifest(header)
        assert restored == default_ranges
