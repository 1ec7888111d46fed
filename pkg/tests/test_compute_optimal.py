import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abcscale import synthetic
from abcscale.compute_optimal import (
    FLOPS_PER_PARAM_TOKEN,
    TABLE_CONFIGS,
    TABLE_NOMINAL,
    TABLE_TOLERANCE,
    ModelConfig,
    closed_form_allocation,
    constrained_search,
    golden_section,
    loss_along_budget,
    param_count,
    sweep,
)
from abcscale.laws import DomainError, Law, LawParams


def chin(a=400.0, b=410.0, e=1.7, alpha=0.34, beta=0.28):
    return LawParams(Law.CHINCHILLA, a=a, b=b, e=e, alpha=alpha, beta=beta)


def grid_argmin(params, flops, u_d=None, points=20001):
    n = np.geomspace(1e6, flops / 6, points)
    loss = np.asarray(loss_along_budget(params, flops, n, u_d))
    return float(n[int(np.argmin(loss))])


class TestClosedForm:
    def test_symmetric_law_splits_evenly(self):
        res = closed_form_allocation(chin(a=1.0, b=1.0, alpha=0.5, beta=0.5), 6e20)
        assert res.n_opt == pytest.approx(1e10, rel=1e-12)
        assert res.d_opt == pytest.approx(1e10, rel=1e-12)
        assert res.a_exp == 0.5 and res.b_exp == 0.5

    def test_exponents_sum_to_one(self):
        res = closed_form_allocation(chin(alpha=0.3391, beta=0.2849), 1e21)
        assert res.a_exp + res.b_exp == 1.0

    def test_flops_identity(self):
        for flops in (1e18, 3.7e20, 1e24):
            res = closed_form_allocation(chin(), flops)
            assert FLOPS_PER_PARAM_TOKEN * res.n_opt * res.d_opt == pytest.approx(flops, rel=1e-12)

    def test_matches_dense_grid(self):
        for flops in (1e19, 1e21, 1e23):
            res = closed_form_allocation(chin(), flops)
            assert res.n_opt == pytest.approx(grid_argmin(chin(), flops), rel=0.01)

    def test_epochs(self):
        res = closed_form_allocation(chin(), 1e21, u_d=1e9)
        assert res.epochs == pytest.approx(res.d_opt / 1e9, rel=1e-15)

    def test_rejects_other_laws_and_bad_budgets(self):
        with pytest.raises(DomainError):
            closed_form_allocation(synthetic.SMS_FIXTURE, 1e21)
        with pytest.raises(DomainError):
            closed_form_allocation(chin(), 0.0)
        with pytest.raises(DomainError):
            closed_form_allocation(chin(), math.inf)

    @given(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(1e18, 1e25))
    def test_more_compute_never_shrinks_either_side(self, alpha, beta, flops):
        p = chin(alpha=alpha, beta=beta)
        lo = closed_form_allocation(p, flops)
        hi = closed_form_allocation(p, flops * 10)
        assert hi.n_opt >= lo.n_opt and hi.d_opt >= lo.d_opt


class TestSearch:
    def test_golden_section_on_parabola(self):
        x, fx = golden_section(lambda t: (t - 1.3) ** 2, -5.0, 5.0, 1e-9)
        assert abs(x - 1.3) < 1e-8 and fx < 1e-16

    def test_agrees_with_closed_form(self):
        for flops in (1e19, 1e21, 1e23):
            cf = closed_form_allocation(chin(), flops)
            gs = constrained_search(chin(), flops)
            assert gs.n_opt == pytest.approx(cf.n_opt, rel=1e-3)
            assert not gs.at_bound

    def test_budget_identity(self):
        res = constrained_search(synthetic.SMS_FIXTURE, 1e21, u_d=1e10)
        assert FLOPS_PER_PARAM_TOKEN * res.n_opt * res.d_opt == pytest.approx(1e21, rel=1e-12)

    def test_matches_grid_for_repetition_law(self):
        p = synthetic.SMS_FIXTURE
        for flops in (1e20, 1e21):
            res = constrained_search(p, flops, u_d=8.4e9)
            assert res.n_opt == pytest.approx(grid_argmin(p, flops, 8.4e9), rel=0.01)

    def test_no_data_term_pins_to_bound(self):
        res = constrained_search(chin(b=0.0), 1e21)
        assert res.at_bound
        assert res.n_opt == pytest.approx(1e21 / 6, rel=1e-4)

    def test_needs_unique_tokens_for_repetition_laws(self):
        with pytest.raises(DomainError):
            constrained_search(synthetic.SMS_FIXTURE, 1e21)

    def test_budget_too_small(self):
        with pytest.raises(DomainError):
            constrained_search(chin(), 6e5)

    def test_sweep_rows_on_budget(self):
        rows = sweep(chin(), 1e20, points=50)
        assert len(rows) == 50
        for n, d, loss in rows:
            assert 6 * n * d == pytest.approx(1e20, rel=1e-12)
            assert loss > 1.7
        n_best = min(rows, key=lambda r: r[2])[0]
        assert n_best == pytest.approx(closed_form_allocation(chin(), 1e20).n_opt, rel=0.5)


class TestParamCount:
    def test_embedding_only_without_layers(self):
        assert param_count(ModelConfig(64, 0, 256, 4, 16, 1000)) == 64_000

    def test_hand_count(self):
        cfg = ModelConfig(hidden=8, layers=2, ff_hidden=32, heads=2, head_size=4, vocab=10)
        per_layer = 4 * 8 * 8 + 3 * 8 * 32 + 2 * 8
        assert param_count(cfg) == 80 + 2 * per_layer

    @given(st.integers(0, 40))
    def test_monotone_in_layers(self, layers):
        a = ModelConfig(512, layers, 2048, 8, 64, 1000)
        b = ModelConfig(512, layers + 1, 2048, 8, 64, 1000)
        assert param_count(b) > param_count(a)

    def test_table_sizes_within_band(self):
        for name, cfg in TABLE_CONFIGS.items():
            rel = param_count(cfg) / TABLE_NOMINAL[name] - 1
            assert abs(rel) <= TABLE_TOLERANCE, name

    def test_table_sizes_increase(self):
        counts = [param_count(c) for c in TABLE_CONFIGS.values()]
        assert counts == sorted(counts)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ModelConfig(0, 1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            ModelConfig(1, -1, 1, 1, 1, 1)
