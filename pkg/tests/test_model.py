import numpy as np
import pytest

from conftest import tiny_config
from spheremoe import grad as G
from spheremoe.errors import ConfigError, FormatError, NumericError, ShapeError
from spheremoe.grad import Tensor, grad_check, parameter
from spheremoe.model import (
    AdamW, Attention, Batch, PerceptionDecoder, SemanticDecoder, bank_from_cohort, clip_grad_norm,
    derangement, evaluate, finetune, fit, forward_perception, load_checkpoint, make_split,
    perception_loss, save_checkpoint, semantic_loss, squared_error, train, write_metrics,
)
from spheremoe.sgmoe import load_balance_loss


@pytest.fixture
def bank64(tiny_cohort):
    return bank_from_cohort(tiny_cohort, tiny_config(dtype="f64"))


# losses and optimizer ----------------------------------------------------------

def test_squared_error_hand_example():
    pred = Tensor([[1.0, 2.0], [0.0, 0.0]])
    tgt = np.array([[0.0, 0.0], [1.0, 1.0]])
    # per-sample sums 5 and 2, batch mean 3.5
    assert squared_error(pred, tgt).item() == pytest.approx(3.5)
    with pytest.raises(ShapeError):
        squared_error(pred, np.zeros((2, 3)))
    assert perception_loss(pred, tgt).item() == pytest.approx(3.5)


def test_semantic_loss_adds_weighted_lb_term():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 2)))
    ta, tb = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    from spheremoe.sgmoe import GateDecision

    gate = GateDecision(np.zeros((5, 1), int), np.ones((5, 1)), np.zeros((5, 4)))
    base = semantic_loss(a, b, ta, tb).item()
    assert base == pytest.approx(squared_error(a, ta).item() + squared_error(b, tb).item())
    lb = load_balance_loss([gate]).item()
    assert semantic_loss(a, b, ta, tb, [gate], 0.5).item() == pytest.approx(base + 0.5 * lb)


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose([clipped[0][0], clipped[1][0]], [0.6, 0.8])
    same, _ = clip_grad_norm(g, 10.0)
    assert same[0][0] == 3.0


def test_adamw_decay_is_decoupled():
    p = parameter([2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step([np.zeros(1)])
    # zero gradient: only the decoupled shrink applies
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))
    q = parameter([1.0])
    opt = AdamW([q], lr=0.1, weight_decay=0.0)
    opt.step([np.array([7.0])])
    # first Adam step moves by lr regardless of gradient scale
    assert q.data[0] == pytest.approx(0.9, abs=1e-6)


# gradient checks ------------------------------------------------------------------

def test_attention_grad_check_f64():
    rng = np.random.default_rng(1)
    att = Attention(8, 2, rng, "f64")
    x = parameter(rng.normal(size=(2, 5, 8)))
    tgt = Tensor(rng.normal(size=(2, 5, 8)))
    res = grad_check(lambda: G.mse(att(x), tgt), [x] + att.parameters())
    assert res.max_rel_err < 1e-5


def test_perception_decoder_grad_check_f64():
    cfg = tiny_config(dtype="f64")
    rng = np.random.default_rng(2)
    m = PerceptionDecoder(cfg, 10, rng)
    xl, xr = rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
    z = rng.normal(size=(3, 16))
    res = grad_check(lambda: perception_loss(forward_perception(m, xl, xr), z), m.parameters(), max_elems=20)
    assert res.max_rel_err < 1e-5
    with pytest.raises(ShapeError):
        forward_perception(m, xl, xl)


@pytest.mark.parametrize("variant", ["anatomy", "subject_id", "functional_stats"])
def test_full_model_grad_check_frozen_routing(bank64, variant):
    cfg = tiny_config(variant, dtype="f64")
    model = SemanticDecoder(cfg, bank64.ids, np.random.default_rng(3))
    batch = Batch(np.array([0, 1, 2]), np.array([1, 2, 3]))
    frozen = [g.expert_indices for g in model.forward(batch, bank64).gates]
    img, txt = batch.gather(bank64, "e_image"), batch.gather(bank64, "e_text")

    def f():
        r = model.forward(batch, bank64, frozen=frozen)
        return semantic_loss(r.e_image, r.e_text, img, txt, r.gates, 0.01)

    res = grad_check(f, model.parameters(), max_elems=6)
    assert res.max_rel_err < 1e-4


# model behaviour -----------------------------------------------------------------

def test_output_shapes_and_cls_readout(tiny_cohort):
    cfg = tiny_config()
    bank = bank_from_cohort(tiny_cohort, cfg)
    model = SemanticDecoder(cfg, bank.ids)
    p = model.predict(Batch(np.array([0, 3]), np.array([0, 0])), bank, trace=True)
    assert p.e_image_hat.shape == (2, 32) and p.e_text_hat.shape == (2, 32)
    T = 8 + bank.pyr_L[1].count + bank.pyr_R[1].count
    assert p.routing[0].shape == (2, T, 2)


def test_anatomy_routing_invariant_to_subject_labels(tiny_cohort):
    cfg = tiny_config(depth=2)
    bank = bank_from_cohort(tiny_cohort, cfg)
    ids = bank.ids
    m1 = SemanticDecoder(cfg, ids, np.random.default_rng(7))
    m2 = SemanticDecoder(cfg, list(reversed(ids)), np.random.default_rng(7))
    batch = Batch(np.array([0, 1, 2, 3]), np.array([2, 2, 5, 5]))
    r1, r2 = m1.forward(batch, bank), m2.forward(batch, bank)
    for g1, g2 in zip(r1.gates, r2.gates):
        assert g1.same_routing(g2)
    assert np.array_equal(r1.e_image.data, r2.e_image.data)


def test_subject_id_routing_depends_on_labels(tiny_cohort):
    cfg = tiny_config("subject_id", depth=2)
    bank = bank_from_cohort(tiny_cohort, cfg)
    m1 = SemanticDecoder(cfg, bank.ids, np.random.default_rng(7))
    m2 = SemanticDecoder(cfg, list(reversed(bank.ids)), np.random.default_rng(7))
    batch = Batch(np.array([0, 1, 2, 3]), np.array([2, 2, 5, 5]))
    assert not all(a.same_routing(b) for a, b in zip(m1.forward(batch, bank).gates, m2.forward(batch, bank).gates))


def test_swapped_anatomy_uses_a_derangement(tiny_cohort):
    d = derangement([0, 1, 2, 3], seed=4)
    assert sorted(d.values()) == [0, 1, 2, 3]
    assert all(k != v for k, v in d.items())
    assert derangement([5], 0) == {5: 5}
    cfg = tiny_config("swapped_anatomy")
    bank = bank_from_cohort(tiny_cohort, cfg)
    m = SemanticDecoder(cfg, bank.train_ids if hasattr(bank, "train_ids") else [0, 1, 2])
    assert m._anatomy_source(0) != 0
    assert m._anatomy_source(3) == 3  # unseen subjects keep their own anatomy


def test_random_anatomy_is_seeded_per_sample(tiny_cohort):
    cfg = tiny_config("random_anatomy")
    bank = bank_from_cohort(tiny_cohort, cfg)
    m = SemanticDecoder(cfg, bank.ids)
    b = Batch(np.array([0, 0]), np.array([1, 1]))
    e = m.token_struct(b, bank, 20).data.reshape(2, 20, -1)
    assert np.array_equal(e[0], e[1])
    e2 = m.token_struct(Batch(np.array([0]), np.array([2])), bank, 20).data
    assert not np.array_equal(e[0], e2)


def test_lr_zero_leaves_parameters_unchanged(tiny_cohort):
    cfg = tiny_config(weight_decay=0.0)
    cfg.train.lr = 0.0
    bank = bank_from_cohort(tiny_cohort, cfg)
    model = SemanticDecoder(cfg, bank.ids)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    fit(model, bank, {0: np.arange(4)}, cfg, 1, np.random.default_rng(0))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_single_sample_overfit(tiny_cohort):
    cfg = tiny_config()
    cfg.train.lr = 1e-2
    bank = bank_from_cohort(tiny_cohort, cfg)
    model = SemanticDecoder(cfg, bank.ids)
    log = fit(model, bank, {0: np.array([0])}, cfg, 150, np.random.default_rng(0), batch_size=1)
    assert log[-1]["semantic_loss"] < 0.05 * log[0]["semantic_loss"]


def test_nan_input_raises_numeric_error_with_batch_index(tiny_cohort):
    cfg = tiny_config()
    bank = bank_from_cohort(tiny_cohort, cfg)
    bank[1].x_L[:] = np.nan
    model = SemanticDecoder(cfg, bank.ids)
    with pytest.raises(NumericError) as exc:
        fit(model, bank, {1: np.arange(8)}, cfg, 1, np.random.default_rng(0), batch_size=4)
    assert exc.value.batch_index == 0


def test_training_is_deterministic(tiny_cohort, tmp_path):
    cfg = tiny_config()
    out = []
    for i in range(2):
        bank = bank_from_cohort(tiny_cohort, cfg)
        res = train(bank, cfg, heldout_ids=[3], epochs=2)
        write_metrics(res.metrics, tmp_path / f"m{i}.csv")
        out.append((tmp_path / f"m{i}.csv").read_bytes())
    assert out[0] == out[1]
    assert out[0].decode().splitlines()[0].startswith("epoch,train_loss,semantic_loss")


def test_split_is_disjoint_and_heldout_is_test_only(tiny_cohort):
    bank = bank_from_cohort(tiny_cohort, tiny_config())
    sp = make_split(bank, [0, 1, 2], [3], 0.25, seed=0)
    for s in (0, 1, 2):
        assert not set(sp.train[s]) & set(sp.test[s])
        assert sp.train[s].size + sp.test[s].size == 24
    assert 3 not in sp.train and sp.test[3].size == 24


def test_perception_path_trains(tiny_cohort):
    cfg = tiny_config(path="perception")
    bank = bank_from_cohort(tiny_cohort, cfg)
    res = train(bank, cfg, heldout_ids=[3], epochs=3)
    assert isinstance(res.model, PerceptionDecoder)
    assert res.metrics[-1]["perception_loss"] < res.metrics[0]["perception_loss"]
    assert res.metrics[-1]["semantic_loss"] is None


def test_finetune_curve_and_errors(tiny_cohort):
    cfg = tiny_config()
    bank = bank_from_cohort(tiny_cohort, cfg)
    res = train(bank, cfg, heldout_ids=[3], epochs=1)
    ft = finetune(res.model, bank, 3, 0.5, 2, cfg)
    assert [r["epoch"] for r in ft.metrics] == [0, 1, 2]
    assert ft.train_rows.size == 9 and ft.test_rows.size == 6
    assert not set(ft.train_rows) & set(ft.test_rows)
    with pytest.raises(ConfigError):
        finetune(res.model, bank, 3, 0.0, 1, cfg)
    sub = SemanticDecoder(tiny_config("subject_id"), [0, 1, 2])
    with pytest.raises(ConfigError):
        finetune(sub, bank, 3, 1.0, 1, cfg)


def test_checkpoint_round_trip(tiny_cohort, tmp_path):
    cfg = tiny_config("swapped_anatomy")
    bank = bank_from_cohort(tiny_cohort, cfg)
    model = SemanticDecoder(cfg, [0, 1, 2])
    save_checkpoint(model, tmp_path / "c.npz", {"note": 1})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["note"] == 1 and loaded.derangement == model.derangement
    rows = {3: np.arange(6)}
    assert evaluate(model, bank, rows).loss == evaluate(loaded, bank, rows).loss
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.npz")
    state = model.state_dict()
    state.pop(next(iter(state)))
    arrays = {f"param/{k}": v for k, v in state.items()}
    import json
    arrays["meta"] = np.array(json.dumps({"config": cfg.to_flat(), "kind": "SemanticDecoder",
                                          "subject_ids": [0, 1, 2]}))
    np.savez(tmp_path / "short.npz", **arrays)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.npz")


def test_profiles_differ_only_where_documented():
    from spheremoe.config import desk_config, paper_config

    desk, paper = desk_config(), paper_config()
    assert desk.moe.struct_global is False and paper.moe.struct_global is True
    assert desk.moe.router_input == paper.moe.router_input == "concat"
    assert paper.train.lr == 1e-4 and paper.train.epochs_semantic == 600
    assert desk.train.epochs_semantic <= 50
