import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from volalign.alignment import PretrainConfig, Pretrainer
from volalign.downstream import (
    EfficiencyCurve,
    EfficiencyPoint,
    FinetuneConfig,
    SegmentationNet,
    accuracy,
    build_segmentation_model,
    data_efficiency_sweep,
    dice_score,
    fine_tune_classification,
    fine_tune_segmentation,
    plot_efficiency,
    roc_auc,
    seg_loss,
    _optimizer,
    subsample,
    write_cls_csv,
    write_dice_csv,
    write_efficiency_csv,
)
from volalign.embedders import EmbedderSpec, MockDualEncoder, TemplateCaptioner
from volalign.encoder import EncoderConfig, ReferenceEncoder3D
from volalign.psat import PsatConfig
from volalign.volume_io import generate_synthetic_dataset


# -- seg_loss -------------------------------------------------------------------


def loop_seg_loss(logits, labels, eps=1e-5):
    """Voxel-by-voxel reference of 0.5 * CE + 0.5 * (1 - mean foreground soft Dice)."""
    lg = logits.tolist()
    lb = labels.tolist()
    b, k = len(lg), len(lg[0])
    voxels = [(n, idx) for n in range(b) for idx in np.ndindex(*labels.shape[1:])]
    inter, psum, gsum, ce = [0.0] * k, [0.0] * k, [0.0] * k, 0.0
    for n, idx in voxels:
        z = [lg[n][c] for c in range(k)]
        for i in idx:
            z = [zc[i] for zc in z]
        m = max(z)
        denom = sum(math.exp(v - m) for v in z)
        p = [math.exp(v - m) / denom for v in z]
        y = lb[n]
        for i in idx:
            y = y[i]
        ce -= math.log(p[y])
        for c in range(k):
            psum[c] += p[c]
            gsum[c] += c == y
            inter[c] += p[c] * (c == y)
    dice = [(2 * inter[c] + eps) / (psum[c] + gsum[c] + eps) for c in range(1, k)]
    return 0.5 * ce / len(voxels) + 0.5 * (1 - sum(dice) / len(dice))


class TestSegLoss:
    def test_confident_correct_prediction(self):
        labels = torch.randint(0, 4, (2, 4, 4, 4), generator=torch.Generator().manual_seed(0))
        labels[0, 0, 0, :4] = torch.tensor([0, 1, 2, 3])
        logits = F.one_hot(labels, 4).movedim(-1, 1).double() * 100
        assert seg_loss(logits, labels).item() < 1e-3

    def test_zero_logits_binary(self):
        labels = torch.randint(0, 2, (1, 3, 3, 3), generator=torch.Generator().manual_seed(1))
        _, ce, _ = seg_loss(torch.zeros(1, 2, 3, 3, 3, dtype=torch.float64), labels, return_parts=True)
        assert abs(ce.item() - math.log(2)) <= 1e-12

    @pytest.mark.parametrize("k", [2, 4])
    def test_voxel_loop_oracle(self, k):
        g = torch.Generator().manual_seed(k)
        logits = torch.randn(2, k, 3, 2, 3, dtype=torch.float64, generator=g) * 2
        labels = torch.randint(0, k, (2, 3, 2, 3), generator=g)
        assert abs(seg_loss(logits, labels).item() - loop_seg_loss(logits, labels)) <= 1e-10

    def test_finite_differences(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, generator=g, requires_grad=True)
        labels = torch.randint(0, 2, (1, 4, 4, 4), generator=g)
        assert torch.autograd.gradcheck(lambda z: seg_loss(z, labels), (logits,), eps=1e-6, atol=1e-6)

    def test_shape_and_label_checks(self):
        with pytest.raises(ValueError, match="disagree"):
            seg_loss(torch.zeros(1, 2, 3, 3, 3), torch.zeros(1, 3, 3, 2, dtype=torch.long))
        with pytest.raises(ValueError, match=r"\[0, 2\)"):
            seg_loss(torch.zeros(1, 2, 2, 2, 2), torch.full((1, 2, 2, 2), 2))


# -- metrics ----------------------------------------------------------------------


def count_dice(pred, true, k):
    tp = fp = fn = 0
    for p, t in zip(pred.ravel().tolist(), true.ravel().tolist()):
        tp += p == k and t == k
        fp += p == k and t != k
        fn += p != k and t == k
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestDice:
    def test_worked_example(self):
        pred = np.array([1, 1, 0, 0])
        true = np.array([1, 0, 0, 0])
        assert round(dice_score(pred, true, 1), 4) == 0.6667

    def test_both_empty(self):
        assert dice_score(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), 2) == 1.0

    def test_disjoint(self):
        assert dice_score(np.array([1, 0]), np.array([0, 1]), 1) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int64, (4, 4, 4), elements=st.integers(0, 3)),
           arrays(np.int64, (4, 4, 4), elements=st.integers(0, 3)), st.integers(0, 3))
    def test_counting_oracle(self, pred, true, k):
        d = dice_score(pred, true, k)
        assert d == count_dice(pred, true, k)
        assert 0.0 <= d <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros(3), np.zeros(4), 1)


class TestAuc:
    def test_six_sample_oracle(self):
        scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.7]
        labels = [0, 0, 1, 1, 1, 0]
        assert roc_auc(scores, labels) == pair_auc(scores, labels)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=20))
    def test_pair_oracle_with_ties(self, rows):
        scores = [s / 5 for s, _ in rows]
        labels = [int(y) for _, y in rows]
        auc = roc_auc(scores, labels)
        if len(set(labels)) < 2:
            assert auc is None
        else:
            assert auc == pytest.approx(pair_auc(scores, labels), abs=1e-12)
            assert 0.0 <= auc <= 1.0

    def test_perfect_classifier(self):
        labels = [0, 1, 0, 1, 1, 0]
        assert roc_auc(labels, labels) == 1.0
        assert accuracy(labels, labels) == 1.0

    def test_constant_scores(self):
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class_is_undefined(self):
        assert roc_auc([0.2, 0.9], [1, 1]) is None


# -- harnesses ---------------------------------------------------------------------

SIDE = 16
ENC = EncoderConfig(channels=8, depth=2, heads=2, patch_size=4, side=SIDE)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic_dataset(20, SIDE, 0)


def quick(**kw):
    return FinetuneConfig(**{"steps": 3, "batch_size": 2, "decoder_base": 4, **kw})


def test_decoder_output_shape():
    torch.manual_seed(0)
    for patch in (2, 4, 8):
        enc = ReferenceEncoder3D(EncoderConfig(channels=8, depth=3, heads=2, patch_size=patch, side=16))
        net = SegmentationNet(enc, num_classes=4, base=4)
        assert net(torch.rand(2, 1, 16, 16, 16)).shape == (2, 4, 16, 16, 16)
    with pytest.raises(ValueError, match="power of two"):
        SegmentationNet(ReferenceEncoder3D(EncoderConfig(channels=8, depth=1, heads=2, patch_size=3, side=12)), 4)


def test_segmentation_is_deterministic(ds):
    a = fine_tune_segmentation(None, ds, quick(), ENC)
    b = fine_tune_segmentation(None, ds, quick(), ENC)
    assert a.per_class == b.per_class and a.losses == b.losses
    assert set(a.per_class) == {"sphere", "box", "ellipsoid"}
    assert all(0 <= v <= 1 for v in a.per_class.values())
    assert a.mean_dice == pytest.approx(np.mean(list(a.per_class.values())))


def test_training_reduces_loss(ds):
    res = fine_tune_segmentation(None, ds, quick(steps=40, learning_rate=3e-3), ENC)
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])


def test_empty_foreground_dataset(ds):
    empty = replace(ds, labels=[np.zeros_like(l) for l in ds.labels])
    with pytest.warns(UserWarning, match="never appears"):
        res = fine_tune_segmentation(None, empty, quick(), ENC)
    for v in res.per_class.values():
        assert v in (0.0, 1.0)
    assert all(math.isfinite(l) for l in res.losses)


def test_pretrained_and_scratch_share_decoder_init(ds, tmp_path):
    emb = MockDualEncoder(EmbedderSpec(embed_dim=8, image_input_side=8))
    cap = TemplateCaptioner({v.id: l for v, l in zip(ds.volumes, ds.labels)})
    tr = Pretrainer(ds.volumes, emb, cap, ENC, PsatConfig(num_queries=2, dim=8, heads=2),
                    PretrainConfig(batch_size=4, learning_rate=1e-2))
    tr.train(2)
    path = tr.save(tmp_path / "ck.npz")
    cfg = quick(steps=0)
    from_path = build_segmentation_model(path, ENC, 4, cfg)
    from_module = build_segmentation_model(tr.encoder, ENC, 4, cfg)
    scratch = build_segmentation_model(None, ENC, 4, cfg)
    for (n, a), b, c in zip(from_path.decoder.state_dict().items(), from_module.decoder.state_dict().values(),
                            scratch.decoder.state_dict().values()):
        assert torch.equal(a, b) and torch.equal(a, c), n
    for n, p in from_path.encoder.state_dict().items():
        assert torch.equal(p, tr.encoder.state_dict()[n])
    assert not torch.equal(from_path.encoder.patch_embed.weight, scratch.encoder.patch_embed.weight)
    a = fine_tune_segmentation(path, ds, cfg, ENC)
    b = fine_tune_segmentation(tr.encoder, ds, cfg, ENC)
    assert a.per_class == b.per_class


def test_frozen_encoder_flag():
    cfg = quick(freeze_encoder=True)
    model = build_segmentation_model(None, ENC, 4, cfg)
    opt = _optimizer(model, model.encoder, cfg)
    frozen = {id(p) for p in model.encoder.parameters()}
    trained = [p for g in opt.param_groups for p in g["params"]]
    assert trained and not any(id(p) in frozen for p in trained)


def test_encoder_learning_rate():
    cfg = quick(encoder_lr=1e-5)
    model = build_segmentation_model(None, ENC, 4, cfg)
    head, enc = _optimizer(model, model.encoder, cfg).param_groups
    assert enc["lr"] == 1e-5 and head["lr"] == cfg.learning_rate
    assert {id(p) for p in enc["params"]} == {id(p) for p in model.encoder.parameters()}


def test_classification(ds):
    a = fine_tune_classification(None, ds, quick(steps=4), ENC)
    b = fine_tune_classification(None, ds, quick(steps=4), ENC)
    assert (a.accuracy, a.auc) == (b.accuracy, b.auc)
    assert 0 <= a.accuracy <= 1 and (a.auc is None or 0 <= a.auc <= 1)


def test_classification_single_class_test_split(ds, caplog):
    one = replace(ds, class_labels=[0 if s.value == "test" else c for s, c in zip(ds.splits, ds.class_labels)])
    res = fine_tune_classification(None, one, quick(steps=1), ENC)
    assert res.auc is None
    assert "single class" in caplog.text


class TestSubsample:
    def test_full_fraction_is_identity(self):
        assert subsample(range(10), 1.0, 0) == list(range(10))

    def test_deterministic_and_sized(self):
        a = subsample(range(140), 0.1, 3)
        assert a == subsample(range(140), 0.1, 3) and len(a) == 14 and len(set(a)) == 14

    def test_stratified_proportions(self):
        strata = [0] * 30 + [1] * 70
        out = subsample(range(100), 0.2, 1, strata)
        assert len(out) == 20 and sum(i >= 30 for i in out) == 14

    @pytest.mark.parametrize("f", [0.0, 1.5, 0.01])
    def test_rejected(self, f):
        with pytest.raises(ValueError):
            subsample(range(10), f, 0)


class TestSweep:
    @pytest.mark.filterwarnings("ignore:class .* never appears")
    def test_shape(self, ds):
        pre, scratch = data_efficiency_sweep(None, ds, [0.5, 0.1, 1.0], [0, 1, 2], quick(steps=1), ENC)
        for c in (pre, scratch):
            assert [p.fraction for p in c.points] == [0.1, 0.5, 1.0]
            assert all(len(p.values) == 3 and p.std >= 0 for p in c.points)
        assert (pre.label, scratch.label) == ("pretrained", "scratch")

    def test_full_fraction_matches_standalone(self, ds):
        enc = ReferenceEncoder3D(ENC)
        cfg = quick(steps=2)
        pre, scratch = data_efficiency_sweep(enc, ds, [1.0], [0, 1], cfg, ENC)
        for s, (pv, sv) in enumerate(zip(pre.points[0].values, scratch.points[0].values)):
            assert abs(pv - fine_tune_segmentation(enc, ds, replace(cfg, seed=s), ENC).mean_dice) <= 1e-6
            assert abs(sv - fine_tune_segmentation(None, ds, replace(cfg, seed=s), ENC).mean_dice) <= 1e-6

    def test_needs_two_seeds(self, ds):
        with pytest.raises(ValueError, match="two seeds"):
            data_efficiency_sweep(None, ds, [1.0], [0], quick(), ENC)

    def test_empty_fraction_rejected_before_training(self, ds):
        with pytest.raises(ValueError, match="no training data"):
            data_efficiency_sweep(None, ds, [0.01, 1.0], [0, 1], quick(), ENC)

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            EfficiencyCurve("x", [EfficiencyPoint(0.5, 0, 0, []), EfficiencyPoint(0.5, 0, 0, [])])
        with pytest.raises(ValueError):
            EfficiencyCurve("x", [EfficiencyPoint(1.2, 0, 0, [])])


def test_result_files(ds, tmp_path):
    seg = fine_tune_segmentation(None, ds, quick(steps=1), ENC)
    write_dice_csv(tmp_path / "dice.csv", seg)
    rows = list(csv.DictReader(open(tmp_path / "dice.csv")))
    assert [r["class"] for r in rows] == ["sphere", "box", "ellipsoid", "mean"]
    assert float(rows[-1]["dice"]) == seg.mean_dice
    cls = fine_tune_classification(None, ds, quick(steps=1), ENC)
    write_cls_csv(tmp_path / "cls.csv", cls)
    assert [r["metric"] for r in csv.DictReader(open(tmp_path / "cls.csv"))] == ["accuracy", "auc"]
    curves = [EfficiencyCurve(n, [EfficiencyPoint(0.1, 0.3, 0.01, [0.29, 0.31]),
                                  EfficiencyPoint(1.0, 0.6, 0.02, [0.58, 0.62])]) for n in ("pretrained", "scratch")]
    write_efficiency_csv(tmp_path / "eff.csv", curves)
    rows = list(csv.DictReader(open(tmp_path / "eff.csv")))
    assert len(rows) == 4 and {r["init"] for r in rows} == {"pretrained", "scratch"}
    png = plot_efficiency(tmp_path / "eff.png", curves)
    assert png.read_bytes()[:4] == b"\x89PNG"
