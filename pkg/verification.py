"""Finite-difference verification of every differentiable operation.

Each check maps a parameter array to a scalar through one operation (or a whole
model) and compares the analytic gradient with central differences in double
precision. `run_gradcheck_suite` repeats every check over several seeds and
reports the worst relative error per check.
"""
from typing import Callable, Dict, List, Tuple

import numpy as np

import numerics as nx
from config import LossWeights, ModelConfig, SceneDefaults
from gasa import GasaLayer, GasaModel, MultiHeadAttention, gasa_attention, gasa_bias, kernel_init
from losses import (LossInputs, align_loss, contrastive_rank_loss, dice_loss, focal_loss,
                    localization_loss, presence_loss, total_loss)
from scenegen import make_twin_scene

TOLERANCE = 1e-4
# Discrepancies this small are roundoff on gradients that are zero or tiny
ABS_TOL = 1e-8

Check = Callable[[np.random.Generator], float]


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _check(f, theta, rng, max_coords=None) -> float:
    return nx.grad_check(f, theta, max_coords=max_coords, rng=rng, abs_tol=ABS_TOL)


def check_matmul(rng):
    b, w = rng.normal(size=(2, 4, 3)), _weights(rng, (2, 5, 3))
    return _check(lambda t: nx.sum(nx.matmul(t, b) * w), rng.normal(size=(2, 5, 4)), rng)


def check_broadcast_arithmetic(rng):
    a = rng.normal(size=(3, 4))
    denom = rng.uniform(1.0, 2.0, size=(3, 4))
    w = _weights(rng, (3, 4))
    return _check(lambda t: nx.sum(((a + t) * t - t / denom + (a / (t * t + 1.0))) * w),
                  rng.normal(size=(4,)), rng)


def _elementwise(op: Callable, low: float, high: float, signed: bool = False) -> Check:
    def check(rng):
        theta = rng.uniform(low, high, size=(3, 4))
        if signed:
            theta = theta * rng.choice([-1.0, 1.0], size=theta.shape)
        w = _weights(rng, (3, 4))
        return _check(lambda t: nx.sum(op(t) * w), theta, rng)
    return check


def check_shape_ops(rng):
    w = _weights(rng, (2, 6))
    idx = np.array([0, 2, 2, 1])

    def f(t):
        x = nx.reshape(nx.transpose(t, (1, 0)), (2, 6))
        picked = nx.take(x, idx, axis=1)
        return nx.sum(x * w) + nx.sum(nx.mean(picked, axis=1) * 3.0) + nx.sum(nx.concat([t[0], t[1]]))
    return _check(f, rng.normal(size=(4, 3)), rng)


def check_softmax_with_bias(rng):
    logits = rng.normal(size=(2, 3, 5))
    w = _weights(rng, (2, 3, 5))
    return _check(lambda t: nx.sum(nx.softmax_with_bias(logits, t) * w), rng.normal(size=(3, 5)), rng)


def check_layer_norm(rng):
    gain, shift = rng.normal(size=6), rng.normal(size=6)
    w = _weights(rng, (4, 6))
    return _check(lambda t: nx.sum(nx.layer_norm(t, gain, shift) * w), rng.normal(size=(4, 6)), rng)


def check_smooth_l1(rng):
    theta = rng.uniform(0.1, 2.5, size=8) * rng.choice([-1.0, 1.0], size=8)
    return _check(lambda t: nx.sum(nx.smooth_l1(t, 1.0)), theta, rng)


def _geometry(rng, n: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    return rng.uniform(-2.0, 2.0, size=(n, 3)), rng.uniform(-2.0, 2.0, size=(m, 3)) + 0.05


def check_attention_with_bias(rng):
    with nx.precision("double"):
        attn = MultiHeadAttention(8, 2, rng, "attn")
        kernel = kernel_init(rng, hidden=32)
    qpos, kpos = _geometry(rng, 3, 5)
    keys = rng.normal(size=(5, 8))
    w = _weights(rng, (3, 8))
    beta = 1.3

    def f(t):
        out, _ = gasa_attention(attn, t, keys, kernel, beta, query_positions=qpos, key_positions=kpos)
        return nx.sum(out * w)
    return _check(f, rng.normal(size=(3, 8)), rng)


def check_distance_kernel(rng):
    with nx.precision("double"):
        kernel = kernel_init(rng, hidden=32)
    dist = rng.uniform(0.2, 6.0, size=(4, 5))
    w = _weights(rng, (4, 5))
    original = kernel.params["w2"]

    def f(t):
        kernel.params["w2"] = t
        try:
            return nx.sum(gasa_bias(kernel, 0.7, dist) * w)
        finally:
            kernel.params["w2"] = original
    return _check(f, original.value.copy(), rng)


def check_focal(rng):
    target = rng.random((3, 6)) > 0.5
    return _check(lambda t: focal_loss(t, target), rng.uniform(0.05, 0.95, size=(3, 6)), rng)


def check_dice(rng):
    target = rng.random((3, 6)) > 0.5
    return _check(lambda t: dice_loss(t, target), rng.uniform(0.05, 0.95, size=(3, 6)), rng)


def check_align(rng):
    ious = rng.uniform(0.0, 1.0, size=6)
    ranks = np.argsort(np.argsort(-ious))
    return _check(lambda t: align_loss(t, ious, ranks), rng.uniform(0.05, 0.95, size=6), rng)


def check_contrastive(rng):
    ious = rng.uniform(0.0, 1.0, size=6)
    return _check(lambda t: contrastive_rank_loss(t, ious, 0.5), rng.normal(size=6), rng)


def check_centroid(rng):
    gt = rng.normal(size=3)
    offset = rng.uniform(0.1, 2.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    return _check(lambda t: localization_loss(t, gt, 0.9, 1)[0], gt + offset, rng)


def check_presence(rng):
    label = int(rng.integers(2))
    return _check(lambda t: presence_loss(nx.reshape(t, ()), label), rng.uniform(0.05, 0.95, size=(1,)), rng)


def _tiny_config(**overrides) -> ModelConfig:
    values = dict(dim=8, num_heads=2, num_queries=3, num_layers=1, ffn_mult=2, feature_dim=4,
                  kernel_hidden=32, pe_frequencies=2, centroid_hidden=4, block_size=4)
    values.update(overrides)
    return ModelConfig(**values)


def _tiny_scene(seed: int):
    defaults = SceneDefaults(num_views=2, width=8, height=8, feature_dim=4)
    return make_twin_scene(0.5, seed=seed, defaults=defaults)


def check_gasa_layer(rng):
    with nx.precision("double"):
        model = GasaModel(_tiny_config(), seed=int(rng.integers(1 << 31)))
        sample = _tiny_scene(int(rng.integers(1 << 31)))
        memory = model.encode(sample.tokens(4))
        layer = GasaLayer(8, 2, 2, 1.0, rng, "check")
    text = nx.DualTensor(rng.normal(size=(1, 8)))
    qpos = memory.positions[rng.integers(memory.positions.shape[0], size=3)] + 0.05
    w = _weights(rng, (3, 8))
    original = layer.gasa_attn.params["wq"]

    def f(t):
        layer.gasa_attn.params["wq"] = t
        try:
            out, _ = layer(nx.DualTensor(np.ones((3, 8)) * 0.1), text, memory, model.kernel, qpos)
            return nx.sum(out * w)
        finally:
            layer.gasa_attn.params["wq"] = original
    return _check(f, original.value.copy(), rng, max_coords=16)


DECODER_PARAMETERS = ("query_embed", "layers.0.gasa_attn.wq", "layers.0.text_attn.wv", "mask_head.w",
                      "confidence_head.w", "centroid_head.w2", "encoder.beta", "kernel.w2", "pe.w1")


def check_decoder(rng):
    """Full model, total loss, a sample of coordinates from several parameter tensors."""
    with nx.precision("double"):
        model = GasaModel(_tiny_config(), seed=int(rng.integers(1 << 31)))
    sample = _tiny_scene(int(rng.integers(1 << 31)))
    grid = sample.tokens(4)
    sphere = sample.class_table.index("sphere")
    weights = LossWeights()

    def loss_with(name: str):
        def f(t):
            previous = model.replace_parameter(name, t)
            try:
                memory = model.encode(grid)
                out = model.forward(memory, sample.text_embedding(sphere), 1)
                inputs = LossInputs(masks=out.masks, confidences=out.confidences, centroid=out.centroid,
                                    gt_masks=sample.gt_masks(1), gt_centroid=sample.object(1).center)
                return total_loss(inputs, weights).graph
            finally:
                model.replace_parameter(name, previous)
        return f

    worst = 0.0
    params = model.parameters()
    for name in DECODER_PARAMETERS:
        worst = max(worst, _check(loss_with(name), params[name].value.copy(), rng, max_coords=6))
    return worst


CHECKS: List[Tuple[str, Check]] = [
    ("matmul", check_matmul),
    ("broadcast_arithmetic", check_broadcast_arithmetic),
    ("shape_ops", check_shape_ops),
    ("gelu", _elementwise(nx.gelu, -2.0, 2.0)),
    ("sigmoid", _elementwise(nx.sigmoid, -3.0, 3.0)),
    ("relu", _elementwise(nx.relu, 0.1, 2.0, signed=True)),
    ("exp", _elementwise(nx.exp, -2.0, 2.0)),
    ("log", _elementwise(nx.log, 0.2, 3.0)),
    ("sqrt", _elementwise(nx.sqrt, 0.2, 3.0)),
    ("pow", _elementwise(lambda t: t ** 3.0, -2.0, 2.0)),
    ("softmax_with_bias", check_softmax_with_bias),
    ("layer_norm", check_layer_norm),
    ("smooth_l1", check_smooth_l1),
    ("distance_kernel", check_distance_kernel),
    ("attention_with_bias", check_attention_with_bias),
    ("focal", check_focal),
    ("dice", check_dice),
    ("align", check_align),
    ("contrastive", check_contrastive),
    ("centroid", check_centroid),
    ("presence", check_presence),
    ("gasa_layer", check_gasa_layer),
    ("decoder", check_decoder),
]


def run_gradcheck_suite(seeds: int = 10, names=None, verbose: bool = True) -> Dict[str, float]:
    """Worst relative error per check over `seeds` seeds."""
    results = {}
    for name, check in CHECKS:
        if names and name not in names:
            continue
        worst = 0.0
        for seed in range(seeds):
            worst = max(worst, check(np.random.default_rng([seed, len(results)])))
        results[name] = worst
        if verbose:
            status = "ok" if worst < TOLERANCE else "FAIL"
            print(f"{name:<22} max rel err {worst:.3e}  {status}")
    return results


def suite_passed(results: Dict[str, float]) -> bool:
    return all(error < TOLERANCE for error in results.values())
