import numpy as np
import pytest

from dynid import model_gen as mg


@pytest.fixture(scope="session")
def default_ranges():
    return mg.VariationRanges()


@pytest.fixture(scope="session")
def robot():
    """One fixed generated robot shared by read-only tests."""
    return mg.generate_robot(seed=7)


@pytest.fixture(scope="session")
def robots():
    return [mg.generate_robot(seed=s) for s in range(8)]


def make_two_link(l1=0.4, l2=0.3, m1=2.0, m2=1.5, lc1=0.25, lc2=0.12,
                  I1=(0.05, 0.04, 0.01), I2=(0.03, 0.02, 0.008),
                  mu=((0.0, 0.0), (0.0, 0.0))):
    """Planar 2R chain: both joints about +y, links along local z, gravity -z.

    Joint angles are measured from the vertical; positive rotation tips the
    links toward +x.
    """
    template = mg.KinematicTemplate(
        joint_axes=((0, 1, 0), (0, 1, 0)),
        joint_origins=((0, 0, 0), (0, 0, l1)),
        joint_rpy=((0, 0, 0), (0, 0, 0)),
        joint_limits=((-50, 50), (-50, 50)),
        link_lengths=(l1, l2))
    links = (
        mg.LinkSpec(mg.CYLINDER, 0.08, l1, m1, lc1 - l1 / 2, I1),
        mg.LinkSpec(mg.CYLINDER, 0.08, l2, m2, lc2 - l2 / 2, I2),
    )
    joints = (mg.JointSpec(*mu[0]), mg.JointSpec(*mu[1]))
    return mg.RobotModel(id=0, template=template, links=links, joints=joints, generation_seed=0)


def two_link_lagrangian(q, qd, l1, m1, m2, lc1, lc2, I1y, I2y, g=9.81):
    """Closed-form mass matrix, bias, and gravity for the planar 2R chain.

    Derived from the Lagrangian with angles measured from vertical:
    potential V = g [m1 lc1 cos q1 + m2 (l1 cos q1 + lc2 cos(q1+q2))].
    """
    q1, q2 = q
    qd1, qd2 = qd
    c2 = np.cos(q2)
    M = np.array([
        [m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * c2) + I1y + I2y,
         m2 * (lc2 ** 2 + l1 * lc2 * c2) + I2y],
        [m2 * (lc2 ** 2 + l1 * lc2 * c2) + I2y,
         m2 * lc2 ** 2 + I2y]])
    h = -m2 * l1 * lc2 * np.sin(q2)
    coriolis = np.array([h * (2 * qd1 * qd2 + qd2 ** 2), -h * qd1 ** 2])
    G = np.array([
        -g * ((m1 * lc1 + m2 * l1) * np.sin(q1) + m2 * lc2 * np.sin(q1 + q2)),
        -g * m2 * lc2 * np.sin(q1 + q2)])
    return M, coriolis + G, G


def assert_models_close(a, b, rtol=1e-12):
    """Field-by-field robot comparison with relative float tolerance."""
    assert a.id == b.id and a.generation_seed == b.generation_seed
    np.testing.assert_allclose(a.template.joint_axes, b.template.joint_axes, rtol=rtol, atol=1e-15)
    np.testing.assert_allclose(a.template.joint_origins, b.template.joint_origins, rtol=rtol, atol=1e-15)
    np.testing.assert_allclose(a.template.joint_rpy, b.template.joint_rpy, rtol=rtol, atol=1e-15)
    np.testing.assert_allclose(a.template.joint_limits, b.template.joint_limits, rtol=rtol)
    np.testing.assert_allclose(a.template.link_lengths, b.template.link_lengths, rtol=rtol)
    for la, lb in zip(a.links, b.links):
        assert la.shape == lb.shape
        np.testing.assert_allclose(
            [la.diameter, la.length, la.mass, la.com_offset],
            [lb.diameter, lb.length, lb.mass, lb.com_offset], rtol=rtol, atol=1e-15)
        np.testing.assert_allclose(la.inertia, lb.inertia, rtol=rtol)
    for ja, jb in zip(a.joints, b.joints):
        np.testing.assert_allclose([ja.mu_c, ja.mu_v], [jb.mu_c, jb.mu_v], rtol=rtol, atol=1e-15)


def make_pendulum(length=0.5, mass=2.0, lc=0.3, inertia_y=0.05, mu_c=0.0, mu_v=0.0,
                  limits=(-50, 50)):
    """Single link about -y with a +pi/2 pitch offset: q = 0 is horizontal
    along +x and positive q raises the tip, so the closed form is
    qdd = -(m g lc cos q + friction(qd)) / (I + m lc^2)."""
    template = mg.KinematicTemplate(
        joint_axes=((0, -1, 0),),
        joint_origins=((0, 0, 0),),
        joint_rpy=((0, np.pi / 2, 0),),
        joint_limits=(limits,),
        link_lengths=(length,))
    links = (mg.LinkSpec(mg.CYLINDER, 0.08, length, mass, lc - length / 2,
                         (inertia_y * 1.1, inertia_y, inertia_y * 0.4)),)
    return mg.RobotModel(id=0, template=template, links=links,
                         joints=(mg.JointSpec(mu_c, mu_v),), generation_seed=0)
