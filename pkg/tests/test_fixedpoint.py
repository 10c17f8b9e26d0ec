import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from lpnet.exceptions import CorruptTensorError, OffGridError, UsageError
from lpnet.models.quant import FixedPointFormat, QuantSpecSchema, RoundingScheme
from lpnet.services.fixedpoint import (from_code, on_grid, quantize_det, quantize_stoch, quantize_tensor,
                                       representable_fraction, to_code, to_codes)

Q = FixedPointFormat.parse
BOUNDS_FORMATS = ['Q1.15', 'Q2.14', 'Q8.8', 'Q4.4', 'Q1.3']


class TestFormats(unittest.TestCase):

    def test_parse_and_str(self):
        fmt = Q('Q2.14')
        self.assertEqual((fmt.bd, fmt.ad, fmt.signed), (2, 14, True))
        self.assertEqual(str(fmt), 'Q2.14')
        self.assertEqual(str(Q('Q8.8u')), 'Q8.8u')
        self.assertFalse(Q('Q8.8u').signed)

    def test_limits(self):
        fmt = Q('Q8.8')
        self.assertEqual(fmt.total_bits, 16)
        self.assertEqual(fmt.step(), 2 ** -8)
        self.assertEqual(fmt.max_value(), 2 ** 7 - 2 ** -8)
        self.assertEqual(fmt.min_value(), -128.0)
        self.assertEqual((fmt.min_code, fmt.max_code), (-32768, 32767))
        unsigned = Q('Q8.8u')
        self.assertEqual((unsigned.min_value(), unsigned.max_value()), (0.0, 256 - 2 ** -8))

    def test_invalid_formats(self):
        for text in ['Q8', 'q8.8', 'Q8.-1', 'Q20.20', '']:
            with self.assertRaises(UsageError):
                Q(text)
        with self.assertRaises(UsageError):
            FixedPointFormat(0, 8, signed=True)

    def test_scheme_tokens(self):
        self.assertIs(RoundingScheme.parse('det'), RoundingScheme.DETERMINISTIC)
        self.assertIs(RoundingScheme.parse('STOACHASTIC'), RoundingScheme.STOCHASTIC)
        self.assertIs(RoundingScheme.parse('stoch'), RoundingScheme.STOCHASTIC)
        self.assertEqual(str(RoundingScheme.STOCHASTIC), 'STOCHASTIC')
        with self.assertRaises(UsageError):
            RoundingScheme.parse('nearest')

    def test_quant_spec_schema(self):
        quant = QuantSpecSchema().load({'weight_fmt': 'Q2.14', 'act_fmt': 'Q14.2', 'scheme': 'STOACHASTIC'})
        self.assertEqual(quant.act_fmt, FixedPointFormat(14, 2))
        self.assertIs(quant.scheme, RoundingScheme.STOCHASTIC)
        self.assertEqual(QuantSpecSchema().dump(quant)['scheme'], 'STOCHASTIC')


class TestDeterministic(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(quantize_det(0.0, Q('Q8.8')), 0.0)
        self.assertEqual(quantize_det(0.5, Q('Q2.14')), 0.5)
        self.assertEqual(quantize_det(0.3, Q('Q1.3')), 0.25)
        self.assertEqual(quantize_det(300.0, Q('Q8.8')), 127.99609375)
        self.assertEqual(quantize_det(-300.0, Q('Q8.8')), -128.0)

    def test_ties_round_away_from_zero(self):
        fmt = Q('Q1.3')
        self.assertEqual(quantize_det(0.0625, fmt), 0.125)
        self.assertEqual(quantize_det(-0.0625, fmt), -0.125)

    def test_matches_nearest_grid_search(self):
        fmt = Q('Q1.3')
        grid = np.arange(fmt.min_code, fmt.max_code + 1) * fmt.step()
        for x in np.linspace(-0.99, 0.86, 97):
            nearest = grid[np.argmin(np.abs(grid - x))]
            self.assertEqual(quantize_det(x, fmt), nearest)

    def test_non_finite_is_corrupt(self):
        with self.assertRaises(CorruptTensorError) as ctx:
            quantize_tensor(np.array([[0.0, 1.0], [np.nan, 2.0]]), Q('Q8.8'))
        self.assertEqual(ctx.exception.index, (1, 0))
        with self.assertRaises(CorruptTensorError):
            quantize_det(float('inf'), Q('Q8.8'))

    def test_tensor_examples(self):
        fmt = Q('Q8.8')
        zeros = np.zeros((3, 4), dtype=np.float32)
        np.testing.assert_array_equal(quantize_tensor(zeros, fmt), zeros)
        grid = np.array([0.5, -1.25, 3.0, 127.99609375], dtype=np.float32)
        np.testing.assert_array_equal(quantize_tensor(grid, fmt), grid)
        self.assertEqual(quantize_tensor(grid, fmt).dtype, np.float32)

    def test_bounds_monotone_idempotent(self):
        rng = np.random.default_rng(7)
        for text in BOUNDS_FORMATS:
            fmt = Q(text)
            x = np.sort(rng.uniform(fmt.min_value(), fmt.max_value(), 10 ** 4))
            q = quantize_tensor(x, fmt)
            self.assertTrue(np.all(np.abs(q - x) <= 2.0 ** (-fmt.ad - 1)), text)
            self.assertTrue(np.all(np.diff(q) >= 0), text)
            np.testing.assert_array_equal(quantize_tensor(q, fmt), q)
            self.assertTrue(np.all(on_grid(q, fmt)))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), st.sampled_from(BOUNDS_FORMATS))
    def test_saturates_into_range(self, x, text):
        fmt = Q(text)
        q = quantize_det(x, fmt)
        self.assertGreaterEqual(q, fmt.min_value())
        self.assertLessEqual(q, fmt.max_value())
        self.assertTrue(on_grid(q, fmt))


class TestStochastic(unittest.TestCase):

    def test_on_grid_value_is_fixed(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            self.assertEqual(quantize_stoch(0.25, Q('Q1.3'), rng), 0.25)

    def test_requires_random_source(self):
        with self.assertRaises(UsageError):
            quantize_tensor(np.array([0.3]), Q('Q1.3'), RoundingScheme.STOCHASTIC, None)

    def test_neighbour_frequencies(self):
        rng = np.random.default_rng(1)
        draws = quantize_tensor(np.full(10 ** 5, 0.3), Q('Q1.3'), RoundingScheme.STOCHASTIC, rng)
        self.assertTrue(set(np.unique(draws)) <= {0.25, 0.375})
        self.assertAlmostEqual(np.mean(draws == 0.25), 0.6, delta=0.01)

    def test_unbiased(self):
        rng = np.random.default_rng(2)
        for text in BOUNDS_FORMATS:
            fmt = Q(text)
            for target in rng.uniform(fmt.min_value(), fmt.max_value() - fmt.step(), 4):
                draws = quantize_tensor(np.full(10 ** 5, target), fmt, RoundingScheme.STOCHASTIC, rng)
                lower = np.floor(target / fmt.step()) * fmt.step()
                self.assertTrue(np.all((draws == lower) | (draws == lower + fmt.step())))
                stderr = max(np.std(draws) / np.sqrt(draws.size), 1e-12)
                self.assertLessEqual(abs(np.mean(draws) - target), 4 * stderr + 1e-12)

    def test_same_seed_same_draws(self):
        values = np.linspace(-0.9, 0.8, 50)
        a = quantize_tensor(values, Q('Q1.3'), 'STOCHASTIC', np.random.default_rng(5))
        b = quantize_tensor(values, Q('Q1.3'), 'STOCHASTIC', np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestCodes(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(to_code(0.0, Q('Q8.8')), 0)
        self.assertEqual(to_code(-128.0, Q('Q8.8')), -32768)
        self.assertEqual(from_code(1, Q('Q1.15')), 2 ** -15)

    def test_off_grid_and_out_of_range(self):
        with self.assertRaises(OffGridError):
            to_code(0.3, Q('Q1.3'))
        with self.assertRaises(OffGridError):
            to_code(1.0, Q('Q1.3'))
        with self.assertRaises(OffGridError):
            from_code(40000, Q('Q8.8'))

    def test_codes_of_grid_values(self):
        fmt = Q('Q1.15')
        np.testing.assert_array_equal(to_codes([0.0, fmt.step(), -fmt.step()], fmt), [0, 1, -1])

    def test_representable_fraction(self):
        self.assertAlmostEqual(representable_fraction([0.5, 0.25, 100.0], Q('Q2.14')), 2 / 3)


if __name__ == '__main__':
    unittest.main()
