import numpy as np
import pytest

from fibcap.tensornet import NumericalError, ShapeMismatchError, build_segresnet, save_weights
from fibcap.tensornet.weights import read_weights, write_weights
from fibcap.train import (
    AdamWState,
    EarlyStopping,
    FoldPlan,
    TrainConfig,
    adamw_step,
    dice_loss,
    fit,
    make_folds,
    plurality_vote,
    transfer_init,
    validation_loss,
)
from gradcheck import TOL, max_rel_error, numerical_grad

# -- dice --------------------------------------------------------------------------


def test_dice_perfect_and_empty():
    t = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    loss, _ = dice_loss(t.copy(), t)
    assert 0 <= loss <= 1e-5
    loss, _ = dice_loss(np.zeros((4, 4)), np.zeros((4, 4)))
    assert loss == 0.0


def test_dice_disjoint_is_one():
    p = np.zeros((4, 4))
    p[0] = 1
    t = np.zeros((4, 4))
    t[3] = 1
    assert dice_loss(p, t)[0] == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("shape", [(5, 7), (2, 1, 4, 6), (3, 3, 3)])
def test_dice_gradient(shape):
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, shape)
    t = (rng.random(shape) > 0.5).astype(float)
    _, g = dice_loss(p, t)
    assert max_rel_error(g, numerical_grad(lambda: dice_loss(p, t)[0], p)) < TOL


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


# -- AdamW ------------------------------------------------------------------------------

def _paper_cfg(**kw):
    return TrainConfig(lr=1e-5, adam_eps=1e-9, weight_decay=1e-6, **kw)


def test_adamw_first_step_oracle():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([0.5])}, AdamWState(), _paper_cfg())
    expected = 1.0 - 1e-5 - 1e-11
    assert abs(p["w"][0] - expected) / expected < 1e-12


def test_adamw_pure_decay_exact():
    cfg = _paper_cfg()
    p = {"w": np.array([0.75, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), cfg)
    np.testing.assert_array_equal(p["w"], np.array([0.75, -2.0]) - cfg.lr * cfg.weight_decay * np.array([0.75, -2.0]))


def test_adamw_descends_quadratic():
    cfg = TrainConfig(lr=1e-2, adam_eps=1e-12, weight_decay=0.0)
    w = {"w": np.array([3.0, -1.5])}
    before = float(np.sum(w["w"] ** 2))
    adamw_step(w, {"w": 2 * w["w"]}, AdamWState(), cfg)
    assert float(np.sum(w["w"] ** 2)) < before


def test_adamw_deterministic_and_rejects_nan():
    cfg = _paper_cfg()
    runs = []
    for _ in range(2):
        p, s = {"w": np.array([1.0, 2.0])}, AdamWState()
        for g in ([0.5, -0.1], [0.2, 0.3]):
            adamw_step(p, {"w": np.array(g)}, s, cfg)
        runs.append(p["w"].tobytes())
    assert runs[0] == runs[1]
    with pytest.raises(NumericalError):
        adamw_step({"w": np.ones(1)}, {"w": np.array([np.inf])}, AdamWState(), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=10, max_epochs=10)
    assert TrainConfig().batch_size == 64 and TrainConfig().max_epochs == 600


# -- early stopping ------------------------------------------------------------------------------

def _trace(losses, patience=10, max_epochs=600, min_delta=0.0):
    s = EarlyStopping(patience, max_epochs, min_delta)
    for e, v in enumerate(losses, 1):
        s.update(e, v)
        if s.reason:
            return e, s
    return len(losses), s


def test_early_stopping_rule_trace():
    losses = [1.0 - 0.01 * e for e in range(1, 21)] + [0.8] * 40
    stop, s = _trace(losses)
    assert (stop, s.best_epoch, s.reason) == (30, 20, "patience")


def test_early_stopping_max_epochs():
    stop, s = _trace([1.0, 0.9, 0.8, 0.7, 0.6], patience=10, max_epochs=3)
    assert (stop, s.reason) == (3, "max_epochs")


def test_early_stopping_min_delta():
    stop, s = _trace([1.0, 0.999, 0.998] + [0.997] * 20, patience=2, min_delta=0.01)
    assert s.best_epoch == 1 and stop == 3


def test_early_stopping_best_is_minimum():
    rng = np.random.default_rng(0)
    losses = list(rng.random(50))
    stop, s = _trace(losses, patience=5)
    assert s.best_loss == min(losses[:stop])


# -- fit ------------------------------------------------------------------------------------

def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 16, 24)).astype(np.float32) * 0.3
    y = np.zeros((n, 16, 24), np.uint8)
    y[:, 2:5] = 1
    x[:, 2:5] += 0.6
    return x, y


def _toy_model(seed=0):
    return build_segresnet(init_filters=4, levels=2, groups=2, dropout=0.2, seed=seed)


def test_fit_stops_at_max_epochs_and_returns_best():
    cfg = TrainConfig(lr=3e-3, max_epochs=3, patience=2, batch_size=4, seed=0)
    val = _toy_data(3, 2)
    model, log = fit(_toy_model(), _toy_data(6, 1), val, cfg)
    assert log.stop_reason == "max_epochs" and log.epochs == [1, 2, 3]
    assert validation_loss(model, *val) == pytest.approx(log.best_val_loss, abs=1e-6)
    assert log.val_loss[log.epochs_to_best - 1] == min(log.val_loss)


def test_fit_reproducible(tmp_path):
    cfg = TrainConfig(lr=3e-3, max_epochs=2, patience=1, batch_size=4, seed=5, crop_width=16)
    outs = []
    for _ in range(2):
        model, log = fit(_toy_model(), _toy_data(6, 1), _toy_data(2, 2), cfg)
        weights = b"".join(v.tobytes() for v in model.named_parameters().values())
        outs.append((log.train_loss, log.val_loss, weights))
    assert outs[0] == outs[1]
    log.to_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("epoch,train_loss,val_dice_loss")


def test_fit_learns_toy_task():
    cfg = TrainConfig(lr=1e-2, max_epochs=25, patience=24, batch_size=8, seed=0)
    _, log = fit(_toy_model(), _toy_data(8, 1), _toy_data(2, 2), cfg)
    assert log.best_val_loss < 0.7 * log.val_loss[0]


def test_fit_empty_split():
    with pytest.raises(ValueError):
        fit(_toy_model(), (np.zeros((0, 8, 8)), np.zeros((0, 8, 8))), _toy_data(2, 2), TrainConfig())


# -- transfer ---------------------------------------------------------------------------------

def test_transfer_identical_architecture(tmp_path):
    save_weights(_toy_model(1), tmp_path / "a.fcw")
    model, report = transfer_init(_toy_model(2), tmp_path / "a.fcw")
    assert report.randomly_initialized == [] and len(report.matched) == len(model.named_parameters())
    src = _toy_model(1).named_parameters()
    for k, v in model.named_parameters().items():
        np.testing.assert_array_equal(v, src[k])


def test_transfer_head_missing(tmp_path):
    save_weights(_toy_model(1), tmp_path / "a.fcw")
    stored = {k: v for k, v in read_weights(tmp_path / "a.fcw").items() if not k.startswith("head.")}
    write_weights(stored, tmp_path / "b.fcw")
    _, report = transfer_init(_toy_model(2), tmp_path / "b.fcw")
    assert set(report.randomly_initialized) == {"head.norm.gamma", "head.norm.beta", "head.conv.weight",
                                                "head.conv.bias"}


def test_transfer_shape_mismatch(tmp_path):
    save_weights(build_segresnet(init_filters=8, levels=2, seed=0), tmp_path / "a.fcw")
    with pytest.raises(ShapeMismatchError, match="init.conv.weight"):
        transfer_init(_toy_model(), tmp_path / "a.fcw")


def test_transfer_zero_matches(tmp_path):
    write_weights({"other.weight": np.zeros(3, np.float32)}, tmp_path / "z.fcw")
    with pytest.raises(ValueError, match="no layers"):
        transfer_init(_toy_model(), tmp_path / "z.fcw")


# -- folds and voting -------------------------------------------------------------------------------

def test_make_folds_exact_cover():
    ids = [f"pb{i}" for i in range(10)]
    plan = make_folds(ids, k=5, seed=3)
    tests = [p for f in plan.folds for p in f["test"]]
    assert sorted(tests) == sorted(ids)
    for f in plan.folds:
        assert len(f["test"]) == 2 and len(f["val"]) == 2 and len(f["train"]) == 6
        assert not set(f["test"]) & set(f["val"]) and not set(f["train"]) & (set(f["test"]) | set(f["val"]))


def test_make_folds_seeded_and_serialisable():
    ids = list(range(12))
    a, b = make_folds(ids, seed=1), make_folds(ids, seed=1)
    assert a == b
    assert FoldPlan.from_json(a.to_json()) == a
    assert make_folds(ids, seed=2) != a


def test_make_folds_too_few():
    with pytest.raises(ValueError):
        make_folds(["a", "b", "c", "d"], k=5)


def test_plurality_vote():
    ones, zeros = np.ones((2, 2), np.uint8), np.zeros((2, 2), np.uint8)
    assert plurality_vote([ones, ones, ones, zeros, zeros]).min() == 1
    assert plurality_vote([ones, ones, zeros, zeros]).max() == 0
    m = (np.random.default_rng(0).random((5, 6)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(plurality_vote([m] * 4), m)
    with pytest.raises(ValueError):
        plurality_vote([ones, np.ones((3, 2))])
