import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from shield.exceptions import ConfigError, SingularFieldError
from shield.magfield import (DEFAULT_MOMENT_RANGE, EARTH_FIELD_TESLA, Dipole, MagneticEnvironment, Room,
                             dipole_field, disturbance, disturbed_fraction, earth_vector, field_at, field_at_points,
                             random_env)


class DipoleTests(SimpleTestCase):
    def test_axial_value(self):
        m, r = 12.0, 0.7
        B = dipole_field(Dipole((0.0, 0.0, 0.0), (0.0, 0.0, m)), (0.0, 0.0, r))
        assert_allclose(B, [0.0, 0.0, 1e-7 * 2.0 * m / r ** 3], rtol=1e-12, atol=0)

    def test_equatorial_value(self):
        m, r = 12.0, 0.7
        B = dipole_field(Dipole((1.0, 1.0, 1.0), (0.0, 0.0, m)), (1.0 + r, 1.0, 1.0))
        assert_allclose(B, [0.0, 0.0, -1e-7 * m / r ** 3], rtol=1e-12, atol=1e-30)

    def test_singular_radius(self):
        d = Dipole((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
        with self.assertRaises(SingularFieldError):
            dipole_field(d, (0.0, 0.0, 5e-4))

    def test_zero_moment_rejected(self):
        with self.assertRaises(ConfigError):
            Dipole((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def test_moment_range_spans_the_disturbance_band(self):
        weakest, strongest = DEFAULT_MOMENT_RANGE
        scale = 1.0 / EARTH_FIELD_TESLA
        reach = dipole_field(Dipole((0.0, 0.0, 0.0), (0.0, 0.0, strongest)), (0.0, 0.0, 1.5))
        close = dipole_field(Dipole((0.0, 0.0, 0.0), (0.0, 0.0, weakest)), (0.1, 0.0, 0.0))
        self.assertGreaterEqual(scale * float(np.linalg.norm(reach)), 0.1)
        self.assertGreaterEqual(scale * float(np.linalg.norm(close)), 3.0)


class EnvironmentTests(SimpleTestCase):
    def setUp(self):
        self.d1 = Dipole((1.0, 2.0, 0.5), (3.0, -1.0, 2.0))
        self.d2 = Dipole((4.0, 1.0, 2.0), (-5.0, 0.0, 10.0))
        self.env = MagneticEnvironment(dipoles=(self.d1, self.d2))

    def test_earth_vector(self):
        e = earth_vector()
        self.assertAlmostEqual(float(np.linalg.norm(e)), 1.0, places=15)
        assert_allclose(e, [math.cos(math.radians(50)), 0.0, -math.sin(math.radians(50))])

    def test_clean_field_has_unit_magnitude(self):
        env = MagneticEnvironment()
        self.assertAlmostEqual(float(np.linalg.norm(field_at(env, (2.0, 3.0, 1.0)))), 1.0, places=15)

    def test_superposition(self):
        x = np.array([2.0, 2.5, 1.0])
        scale = 1.0 / EARTH_FIELD_TESLA
        expected = np.asarray(self.env.earth).copy()
        expected += scale * dipole_field(self.d1, x)
        expected += scale * dipole_field(self.d2, x)
        assert_allclose(field_at(self.env, x), expected, rtol=1e-15)

    def test_vectorized_matches_pointwise(self):
        points = np.random.default_rng(0).uniform(0.0, 3.0, (4, 5, 3))
        grid = field_at_points(self.env, points)
        self.assertEqual(grid.shape, (4, 5, 3))
        for idx in np.ndindex(4, 5):
            assert_allclose(grid[idx], field_at(self.env, points[idx]), rtol=1e-12, atol=1e-12)

    def test_disturbance_shrinks_with_distance(self):
        env = MagneticEnvironment(dipoles=(Dipole((0.0, 0.0, 0.0), (0.0, 0.0, 20.0)),))
        near, far = disturbance(env, [[0.0, 0.0, 0.5], [0.0, 0.0, 5.0]])
        self.assertGreater(near, 0.15)
        self.assertLess(far, 0.01)

    def test_net_flux_through_a_small_sphere_vanishes(self):
        env = MagneticEnvironment(dipoles=(Dipole((2.3, 2.0, 1.0), (0.0, 30.0, 50.0)),
                                           Dipole((2.0, 2.6, 1.2), (-40.0, 10.0, 0.0)),
                                           Dipole((1.5, 1.5, 0.7), (5.0, 5.0, -5.0))))
        center = np.array([2.0, 2.0, 1.0])
        h = 0.01
        u, w_u = np.polynomial.legendre.leggauss(40)
        phi = 2.0 * math.pi * np.arange(80) / 80
        s = np.sqrt(1.0 - u ** 2)
        normals = np.stack(np.broadcast_arrays(s[:, None] * np.cos(phi), s[:, None] * np.sin(phi), u[:, None]), axis=-1)
        B = field_at_points(env, center + h * normals)
        flux = h ** 2 * (2.0 * math.pi / 80) * float(np.sum(w_u[:, None] * np.sum(B * normals, axis=-1)))
        divergence = flux / (4.0 / 3.0 * math.pi * h ** 3)
        self.assertLess(abs(divergence), 1e-6 * float(np.linalg.norm(field_at(env, center))))

    def test_non_unit_earth_rejected(self):
        with self.assertRaises(ConfigError):
            MagneticEnvironment(earth=(0.5, 0.0, 0.0))


class RandomEnvTests(SimpleTestCase):
    def test_deterministic(self):
        self.assertEqual(random_env(4).dipoles, random_env(4).dipoles)
        self.assertNotEqual(random_env(4).dipoles, random_env(5).dipoles)

    def test_prefix_stable(self):
        self.assertEqual(random_env(8, n_magnets=3).dipoles, random_env(8, n_magnets=5).dipoles[:3])

    def test_no_magnets(self):
        env = random_env(1, n_magnets=0)
        self.assertEqual(env.dipoles, ())
        self.assertEqual(disturbed_fraction(env, Room()), 0.0)

    def test_keep_out(self):
        center = np.array([3.0, 3.0, 1.0])
        env = random_env(2, n_magnets=20, keep_out=[(center, 2.0)])
        for d in env.dipoles:
            self.assertGreaterEqual(float(np.linalg.norm(np.asarray(d.position) - center)), 2.0)
            strength = float(np.linalg.norm(d.moment))
            lo, hi = DEFAULT_MOMENT_RANGE
            self.assertTrue(lo - 1e-9 <= strength <= hi + 1e-9)

    def test_inside_room(self):
        room = Room((0.0, 0.0, 0.0), (2.0, 3.0, 1.0))
        for d in random_env(3, room, n_magnets=10).dipoles:
            self.assertTrue(np.all(np.asarray(d.position) >= 0.0))
            self.assertTrue(np.all(np.asarray(d.position) <= [2.0, 3.0, 1.0]))

    def test_magnets_disturb_part_of_the_room(self):
        fraction = disturbed_fraction(random_env(0, n_magnets=8), Room())
        self.assertGreater(fraction, 0.0)
        self.assertLess(fraction, 1.0)

    def test_disturbed_fraction_grows_with_magnets(self):
        room = Room()
        means = [np.mean([disturbed_fraction(random_env(seed, room, n_magnets=n), room) for seed in range(50)])
                 for n in (0, 1, 2, 4, 8)]
        self.assertEqual(means[0], 0.0)
        self.assertTrue(all(b > a for a, b in zip(means, means[1:])), means)
