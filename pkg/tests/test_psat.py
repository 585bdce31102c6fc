import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradutil import check_grads, numeric_grad
from volalign.alignment import alignment_objective
from volalign.layers import MultiHeadAttention
from volalign.psat import PSAT, PsatConfig, inject_pspe, lookup_pspe, psat_forward


def toy_psat(use_qt=True, use_pspe=True, q=4, d=8, c=6, j=5, heads=2, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    cfg = PsatConfig(num_queries=q, dim=d, heads=heads, use_query_transformer=use_qt, use_pspe=use_pspe)
    return PSAT(cfg, token_dim=c, num_slices=j).to(dtype)


def with_flags(psat, **flags):
    twin = PSAT(replace(psat.config, **flags), psat.token_dim, psat.num_slices).to(psat.queries.dtype)
    twin.load_state_dict(psat.state_dict())
    return twin


def randomize_pspe(psat, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        psat.pspe.copy_(torch.randn(psat.pspe.shape, generator=g, dtype=psat.pspe.dtype))


class TestLookup:
    def test_zero_at_init(self):
        p = toy_psat()
        assert torch.count_nonzero(p.pspe) == 0
        for plane, idx in itertools.product(range(3), range(5)):
            v = lookup_pspe(p, plane, idx)
            assert v.shape == (6,) and torch.count_nonzero(v) == 0

    def test_table_indexing(self):
        p = toy_psat(j=8)
        with torch.no_grad():
            p.pspe[:, 1, 5] = 1.0
        assert torch.equal(lookup_pspe(p, 1, 5), torch.ones(6, dtype=torch.float64))
        assert torch.count_nonzero(lookup_pspe(p, 1, 6)) == 0

    def test_batched_lookup(self):
        p = toy_psat()
        randomize_pspe(p)
        out = lookup_pspe(p, torch.tensor([0, 2]), torch.tensor([3, 1]))
        assert torch.equal(out[0], p.pspe[:, 0, 3]) and torch.equal(out[1], p.pspe[:, 2, 1])

    @pytest.mark.parametrize("plane,idx", [(3, 0), (-1, 0), (0, 5), (0, -1)])
    def test_out_of_range(self, plane, idx):
        with pytest.raises(ValueError, match="out of range"):
            lookup_pspe(toy_psat(), plane, idx)

    def test_table_shape(self):
        p = PSAT(PsatConfig(num_queries=2, dim=8, heads=2), token_dim=6, num_slices=32)
        assert p.pspe.shape == (6, 3, 32)

    def test_gradient_to_table_is_one_column_fd(self):
        # finite-difference probe over a 2 x 3 x 4 toy table
        p = toy_psat(c=2, j=4, d=4, q=3)
        randomize_pspe(p)
        tokens = torch.randn(1, 8, 2, dtype=torch.float64)
        target = F.normalize(torch.randn(4, dtype=torch.float64), dim=0)

        def fn():
            return (psat_forward(p, tokens, 1, 2)[0] * target).sum()

        _, numeric = numeric_grad(fn, p.pspe)
        numeric = numeric.view(2, 3, 4)
        mask = torch.zeros(3, 4, dtype=torch.bool)
        mask[1, 2] = True
        assert numeric[:, ~mask].abs().max() == 0
        assert numeric[:, mask].abs().max() > 1e-6


class TestInject:
    def test_zero_vector_is_noop(self):
        p = toy_psat()
        tokens = torch.randn(2, 8, 6, dtype=torch.float64)
        tok, q = inject_pspe(tokens, p.queries, torch.zeros(2, 6, dtype=torch.float64), p.token_proj)
        assert torch.equal(tok, p.token_proj(tokens))
        assert torch.equal(q, p.queries.expand(2, -1, -1))

    def test_distinct_columns_give_distinct_tokens(self):
        p = toy_psat()
        randomize_pspe(p)
        tokens = torch.randn(8, 6, dtype=torch.float64)
        a, _ = inject_pspe(tokens, p.queries, lookup_pspe(p, 0, 1), p.token_proj)
        b, _ = inject_pspe(tokens, p.queries, lookup_pspe(p, 2, 3), p.token_proj)
        assert not torch.allclose(a, b)

    def test_identity_projection_shifts_by_constant(self):
        proj = torch.nn.Linear(4, 4).double()
        with torch.no_grad():
            proj.weight.copy_(torch.eye(4))
            proj.bias.zero_()
        tokens = torch.randn(5, 4, dtype=torch.float64)
        queries = torch.randn(3, 4, dtype=torch.float64)
        c = 0.75
        tok, q = inject_pspe(tokens, queries, torch.full((4,), c, dtype=torch.float64), proj)
        torch.testing.assert_close(tok, tokens + c, rtol=0, atol=1e-15)
        torch.testing.assert_close(q, queries + c, rtol=0, atol=1e-15)

    def test_dim_mismatch(self):
        p = toy_psat()
        with pytest.raises(ValueError, match=r"5.*6"):
            inject_pspe(torch.randn(8, 6, dtype=torch.float64), p.queries, torch.zeros(5, dtype=torch.float64), p.token_proj)


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _set(weight, values):
    with torch.no_grad():
        weight.copy_(torch.as_tensor(values, dtype=weight.dtype))


class TestAttention:
    def test_dense_oracle_hand_set_weights(self):
        att = MultiHeadAttention(2, 1, cross=True).double()
        wq, wk, wv, wo = [[0.5, -1.0], [2.0, 0.3]], [[1.5, 0.2], [-0.7, 1.1]], [[0.9, 0.4], [-0.3, 2.0]], [[1.0, 0.5], [0.25, -1.0]]
        bq, bk, bv, bo = [0.1, -0.2], [0.3, 0.0], [-0.5, 0.25], [0.05, 0.1]
        for lin, w, b in ((att.q, wq, bq), (att.k, wk, bk), (att.v, wv, bv), (att.out, wo, bo)):
            _set(lin.weight, w)
            _set(lin.bias, b)
        _set(att.norm_q.weight, [1.2, 0.8])
        _set(att.norm_q.bias, [0.1, -0.1])
        _set(att.norm_kv.weight, [0.9, 1.1])
        _set(att.norm_kv.bias, [0.0, 0.2])
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        ctx = np.array([[1.0, 0.0], [-0.4, 0.9]])
        # oracle: y = x + softmax(Q K^T / sqrt(d)) V Wo^T + bo with pre-layer-norm
        hq = _ln(x) * [1.2, 0.8] + [0.1, -0.1]
        hk = _ln(ctx) * [0.9, 1.1] + [0.0, 0.2]
        Q = hq @ np.array(wq).T + bq
        K = hk @ np.array(wk).T + bk
        V = hk @ np.array(wv).T + bv
        expected = np.zeros((2, 2))
        for n in range(2):
            s = [sum(Q[n, a] * K[m, a] for a in range(2)) / math.sqrt(2) for m in range(2)]
            e = [math.exp(v - max(s)) for v in s]
            w = [v / sum(e) for v in e]
            mixed = [sum(w[m] * V[m, a] for m in range(2)) for a in range(2)]
            for a in range(2):
                expected[n, a] = x[n, a] + sum(wo[a][b] * mixed[b] for b in range(2)) + bo[a]
        out = att(torch.tensor(x), torch.tensor(ctx)).detach().numpy()
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-6)

    def test_single_key(self):
        torch.manual_seed(0)
        att = MultiHeadAttention(8, 2, cross=True).double()
        att.keep_weights = True
        x = torch.randn(5, 8, dtype=torch.float64)
        ctx = torch.randn(1, 8, dtype=torch.float64)
        out = att(x, ctx)
        assert torch.equal(att.last_weights, torch.ones_like(att.last_weights))
        value_path = att.out(att.v(att.norm_kv(ctx))).expand(5, -1)
        torch.testing.assert_close(out, x + value_path, rtol=0, atol=1e-12)

    def test_identical_keys_order_independent(self):
        torch.manual_seed(1)
        att = MultiHeadAttention(8, 2, cross=True).double()
        x = torch.randn(3, 8, dtype=torch.float64)
        key = torch.randn(1, 8, dtype=torch.float64)
        a = att(x, key.expand(4, -1))
        b = att(x, key.expand(4, -1).flip(0))
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        torch.manual_seed(2)
        att = MultiHeadAttention(16, 4)
        att.keep_weights = True
        att(torch.randn(3, 7, 16) * 5)
        sums = att.last_weights.sum(-1)
        assert att.last_weights.shape == (3, 4, 7, 7)
        assert (sums - 1).abs().max() <= 1e-6

    def test_non_finite_rejected(self):
        att = MultiHeadAttention(4, 2)
        with pytest.raises(ValueError, match="finite"):
            att(torch.tensor([[float("nan"), 0, 0, 0]]))

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4)


class TestForward:
    def test_full_size_output(self):
        torch.manual_seed(0)
        cfg = PsatConfig()
        assert (cfg.num_queries, cfg.dim) == (300, 512)
        p = PSAT(cfg, token_dim=128, num_slices=32)
        with torch.no_grad():
            out = psat_forward(p, torch.randn(2, 64, 128), torch.tensor([0, 2]), torch.tensor([4, 31]))
        assert out.shape == (2, 512)
        assert ((out.norm(dim=-1) - 1).abs() <= 1e-6).all()

    def test_ex1_path(self):
        p = toy_psat(use_qt=False, use_pspe=False)
        tokens = torch.randn(8, 6, dtype=torch.float64)
        expected = F.normalize(p.head(p.token_proj(tokens)).mean(0), dim=0)
        assert torch.equal(psat_forward(p, tokens, 0, 0), expected)

    def test_zero_init_position_independent(self):
        p = toy_psat()
        tokens = torch.randn(8, 6, dtype=torch.float64)
        assert torch.equal(psat_forward(p, tokens, 0, 3), psat_forward(p, tokens, 2, 4))

    @pytest.mark.parametrize("use_qt", [True, False])
    def test_zero_init_neutrality(self, use_qt):
        p = toy_psat(use_qt=use_qt, use_pspe=True)
        off = with_flags(p, use_pspe=False)
        tokens = torch.randn(3, 8, 6, dtype=torch.float64)
        ref = psat_forward(off, tokens, 0, 0)
        for plane, idx in itertools.product(range(3), range(5)):
            assert torch.equal(psat_forward(p, tokens, plane, idx), ref)

    def test_trained_table_makes_output_position_aware(self):
        p = toy_psat()
        randomize_pspe(p)
        tokens = torch.randn(8, 6, dtype=torch.float64)
        assert not torch.allclose(psat_forward(p, tokens, 0, 3), psat_forward(p, tokens, 2, 4))

    @pytest.mark.parametrize("use_qt,use_pspe", list(itertools.product([True, False], repeat=2)))
    def test_unit_norm_all_flags(self, use_qt, use_pspe):
        p = toy_psat(use_qt, use_pspe)
        randomize_pspe(p)
        for s in range(5):
            tokens = torch.randn(4, 8, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(s)) * (s + 1)
            out = psat_forward(p, tokens, torch.tensor([0, 1, 2, 0]), torch.tensor([0, 1, 2, 4]))
            assert ((out.norm(dim=-1) - 1).abs() <= 1e-6).all()

    def test_ablation_names(self):
        assert PsatConfig(use_query_transformer=False, use_pspe=False).ablation == "Ex1"
        assert PsatConfig(use_query_transformer=True, use_pspe=False).ablation == "Ex2"
        assert PsatConfig().ablation == "Ex3"

    def test_dim_heads_validation(self):
        with pytest.raises(ValueError):
            PsatConfig(dim=10, heads=4)


def _alignment_setup(use_qt=True, use_pspe=True):
    p = toy_psat(use_qt, use_pspe, q=4, d=8, c=6)
    randomize_pspe(p)
    g = torch.Generator().manual_seed(5)
    tokens = torch.randn(3, 8, 6, dtype=torch.float64, generator=g)
    h_i = F.normalize(torch.randn(3, 8, dtype=torch.float64, generator=g), dim=-1)
    h_t = F.normalize(torch.randn(3, 8, dtype=torch.float64, generator=g), dim=-1)
    planes, idx = torch.tensor([0, 1, 2]), torch.tensor([4, 0, 2])

    def fn():
        return alignment_objective(psat_forward(p, tokens, planes, idx), h_i, h_t, 0.5)

    return p, fn


@pytest.mark.parametrize("use_qt,use_pspe", [(True, True), (False, True), (True, False)])
def test_psat_gradients_match_finite_differences(use_qt, use_pspe):
    p, fn = _alignment_setup(use_qt, use_pspe)
    tensors = {"queries": p.queries, "pspe": p.pspe, "mlp.fc1.weight": p.mlp.fc1.weight,
               "mlp.fc2.weight": p.mlp.fc2.weight, "token_proj.weight": p.token_proj.weight}
    if not use_qt:
        tensors.pop("queries")
    if not use_pspe:
        tensors.pop("pspe")
    worst = check_grads(fn, tensors)
    assert max(worst.values()) <= 1e-4, worst


def test_pspe_gradient_single_nonzero_column():
    p = toy_psat()
    randomize_pspe(p)
    tokens = torch.randn(2, 8, 6, dtype=torch.float64)
    out = psat_forward(p, tokens, torch.tensor([1, 1]), torch.tensor([3, 3]))
    (out * torch.randn_like(out)).sum().backward()
    nonzero = (p.pspe.grad.abs().sum(0) > 0)
    assert nonzero.sum() == 1 and nonzero[1, 3]
