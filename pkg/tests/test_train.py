"""Optimizer behavior, loss oracles, metric arithmetic, map rendering."""

import numpy as np
import pytest

from fdcheck import check_grads
from igmamba import tensor as T
from igmamba.data import HsiCube, extract_patches, stratified_split, synthesize_scene
from igmamba.errors import ConfigError, ContractError
from igmamba.network import Model, ModelConfig
from igmamba.tensor import Parameter, Tensor
from igmamba.train import (
    Adam,
    TrainConfig,
    class_color,
    compute_metrics,
    confusion_matrix,
    cross_entropy,
    evaluate,
    predict,
    prediction_map,
    render_map,
    train,
)


def make_param(values):
    t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    return Parameter("p", t)


# -- Adam --------------------------------------------------------------------


def test_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError, match="learning rate"):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError, match="betas"):
        TrainConfig(beta2=1.0).validate()


def test_adam_zero_gradient_leaves_params_unchanged():
    p = make_param([1.0, -2.0, 3.0])
    opt = Adam([p], lr=0.1)
    p.tensor.grad = np.zeros(3)
    opt.step()
    assert np.array_equal(p.tensor.data, [1.0, -2.0, 3.0])


def test_adam_zero_gradient_decays_moments():
    p = make_param([0.0])
    opt = Adam([p], lr=0.1)
    p.tensor.grad = np.array([4.0])
    opt.step()
    m1, v1 = opt.m[0].copy(), opt.v[0].copy()
    p.tensor.grad = np.array([0.0])
    opt.step()
    assert np.allclose(opt.m[0], 0.9 * m1)
    assert np.allclose(opt.v[0], 0.999 * v1)


def test_adam_missing_gradient_skipped():
    p = make_param([5.0])
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.tensor.data, [5.0])
    assert np.all(opt.m[0] == 0.0)


def test_adam_first_step_is_signed_learning_rate():
    # Bias correction makes step 1 move by lr * sign(g) up to eps.
    p = make_param([0.0, 0.0])
    opt = Adam([p], lr=0.01)
    p.tensor.grad = np.array([3.0, -0.5])
    opt.step()
    assert np.allclose(p.tensor.data, [-0.01, 0.01], atol=1e-7)


def test_adam_converges_on_quadratic():
    # Minimize (x - 3)^2 from 0 with lr 0.01.
    p = make_param([0.0])
    opt = Adam([p], lr=0.01)
    for step in range(2000):
        x = p.tensor
        loss = T.reduce_sum((x - 3.0) * (x - 3.0))
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        if abs(p.tensor.data[0] - 3.0) < 1e-3:
            break
    assert abs(p.tensor.data[0] - 3.0) < 1e-3


def test_adam_zero_grad_clears():
    p = make_param([1.0])
    opt = Adam([p])
    p.tensor.grad = np.array([2.0])
    opt.zero_grad()
    assert p.tensor.grad is None


# -- cross-entropy -----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 16)), requires_grad=True)
    loss = cross_entropy(logits, np.array([1, 7, 16]))
    assert np.isclose(loss.item(), np.log(16.0), atol=1e-12)


def test_cross_entropy_hand_example():
    # softmax([ln 3, ln 1]) = [3/4, 1/4]; -ln(3/4) = ln(4/3)
    logits = Tensor(np.array([[np.log(3.0), 0.0]]))
    loss = cross_entropy(logits, np.array([1]))
    assert np.isclose(loss.item(), np.log(4.0 / 3.0), atol=1e-12)


def test_cross_entropy_shift_invariant_and_stable():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 5))
    t = np.array([1, 2, 3, 4])
    base = cross_entropy(Tensor(z), t).item()
    shifted = cross_entropy(Tensor(z + 1000.0), t).item()
    assert np.isclose(base, shifted, atol=1e-9)
    assert np.isfinite(cross_entropy(Tensor(z * 1e4), t).item())


def test_cross_entropy_target_range():
    logits = Tensor(np.zeros((2, 4)))
    with pytest.raises(ConfigError, match="1..4"):
        cross_entropy(logits, np.array([0, 1]))
    with pytest.raises(ConfigError, match="1..4"):
        cross_entropy(logits, np.array([1, 5]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    targets = np.array([2, 1, 3])
    check_grads(
        lambda z: cross_entropy(z, targets),
        [rng.normal(size=(3, 4))],
        tol=1e-6,
        step=1e-6,
    )


# -- metrics -----------------------------------------------------------------


def test_confusion_matrix_layout():
    true = np.array([1, 1, 2, 2])
    pred = np.array([1, 1, 1, 2])
    assert confusion_matrix(true, pred, 2).tolist() == [[2, 0], [1, 1]]


def test_metrics_hand_example():
    m = compute_metrics([1, 1, 2, 2], [1, 1, 1, 2], 2)
    assert m.confusion == [[2, 0], [1, 1]]
    assert m.oa == 0.75
    assert m.aa == 0.75
    assert np.isclose(m.kappa, 0.5, atol=1e-12)
    assert m.per_class == [1.0, 0.5]


def test_kappa_degenerate_agreement():
    # Single class everywhere: expected agreement is 1, kappa defined as 0.
    m = compute_metrics([1, 1, 1], [1, 1, 1], 1)
    assert m.oa == 1.0
    assert m.kappa == 0.0


def test_perfect_prediction():
    true = np.array([1, 2, 3, 1, 2, 3])
    m = compute_metrics(true, true, 3)
    assert m.oa == 1.0 and m.aa == 1.0 and m.kappa == 1.0


def test_metrics_dict_keys():
    m = compute_metrics([1, 2], [1, 2], 2)
    d = m.as_dict(seed=7, config_hash="abc")
    assert list(d) == ["oa", "aa", "kappa", "per_class", "confusion", "seed", "config_hash"]


def test_label_range_check():
    with pytest.raises(ConfigError, match="outside"):
        confusion_matrix([0, 1], [1, 1], 2)


# -- map rendering -----------------------------------------------------------


def read_ppm(path):
    raw = path.read_bytes()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P6" and maxval == b"255"
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def test_render_map_pixels(tmp_path):
    rng = np.random.default_rng(3)
    class_map = rng.integers(0, 5, size=(10, 10))
    path = tmp_path / "map.ppm"
    render_map(class_map, path)
    img = read_ppm(path)
    assert img.shape == (10, 10, 3)
    for r in range(10):  # all 100 pixels against the palette rule
        for c in range(10):
            assert tuple(img[r, c]) == class_color(class_map[r, c])
    assert tuple(img[class_map == 0][0] if (class_map == 0).any() else (0, 0, 0))


def test_unlabeled_renders_black(tmp_path):
    path = tmp_path / "map.ppm"
    render_map(np.zeros((2, 3), dtype=int), path)
    img = read_ppm(path)
    assert np.all(img == 0)
    assert img.shape == (2, 3, 3)


def test_palette_distinct():
    colors = [class_color(i) for i in range(17)]
    assert len(set(colors)) == 17  # black plus 16 class colors


# -- end-to-end training ------------------------------------------------------


def separable_cube(seed=0, h=8, w=8, v=6, c=3):
    """Labels leak into the spectra, so a model can actually fit them."""
    rng = np.random.default_rng(seed)
    labels = np.arange(h * w).reshape(h, w) % (c + 1)
    shift = (labels.astype(np.float32) / (c + 1))[..., None]
    reflectance = rng.random((h, w, v), dtype=np.float32) * 0.2 + shift
    names = [f"class_{i}" for i in range(1, c + 1)]
    return HsiCube(reflectance.astype(np.float32), labels, names).validate()


def tiny_setup(seed=0):
    patches = extract_patches(separable_cube(seed), 5)
    split = stratified_split(patches, [6, 6, 6], seed=seed)
    config = ModelConfig(
        patch_size=5, pca_dim=6, embed_dim=8, num_stages=2, ssm_state=4, num_classes=3
    )
    model = Model(config, np.random.default_rng(seed))
    return model, split


def test_train_loss_decreases():
    model, split = tiny_setup()
    out = train(model, split, TrainConfig(epochs=8, batch_size=16, seed=0, learning_rate=0.01))
    assert out["epoch_losses"][-1] < out["epoch_losses"][0]
    assert out["steps"] == 8 * 2  # 18 samples, batch 16: full batch plus remainder


def test_train_requires_split():
    model, split = tiny_setup()
    unsplit = extract_patches(synthesize_scene(8, 8, 6, 3, 0), 5)
    with pytest.raises(ContractError, match="no train split"):
        train(model, unsplit, TrainConfig(epochs=1))


def test_train_deterministic():
    out = []
    for _ in range(2):
        model, split = tiny_setup(seed=3)
        result = train(model, split, TrainConfig(epochs=2, batch_size=8, seed=3))
        out.append(result["epoch_losses"])
    assert out[0] == out[1]


def test_train_step_budget():
    model, split = tiny_setup()
    out = train(model, split, TrainConfig(epochs=50, batch_size=8), max_steps=5)
    assert out["steps"] == 5


def test_epoch_callback():
    model, split = tiny_setup()
    seen = []
    train(
        model,
        split,
        TrainConfig(epochs=3, batch_size=16),
        on_epoch=lambda e, loss: seen.append((e, loss)),
    )
    assert [e for e, _ in seen] == [1, 2, 3]


def test_predict_and_evaluate_consistent():
    model, split = tiny_setup()
    idx = split.test_indices
    preds = predict(model, split, idx, batch_size=7)
    assert preds.shape == (idx.size,)
    assert preds.min() >= 1 and preds.max() <= 3
    metrics = evaluate(model, split, idx, batch_size=7)
    manual = compute_metrics(split.labels[idx], preds, 3)
    assert metrics.oa == manual.oa and metrics.confusion == manual.confusion


def test_prediction_map_scatter():
    _, split = tiny_setup()
    idx = np.arange(len(split))
    preds = split.labels[idx]  # pretend-perfect predictions
    grid = prediction_map(split, idx, preds)
    assert grid.shape == split.scene_shape
    coords = split.coords
    assert np.array_equal(grid[coords[:, 0], coords[:, 1]], split.labels)
    mask = np.zeros(split.scene_shape, dtype=bool)
    mask[coords[:, 0], coords[:, 1]] = True
    assert np.all(grid[~mask] == 0)
