"""Finite-difference verification suite covering every differentiable op,
the composite layers, all three loss terms, and a small end-to-end model.

Each named check builds fresh float64 inputs from its own seeded stream and
compares analytic gradients against central differences via
``autodiff.grad_check``.  Inputs that land within ``KINK_MARGIN`` of a relu
kink are redrawn: a central difference straddling the kink measures a
subgradient average, not the gradient, so the comparison would be
meaningless there.  Shapes are deliberately tiny; the whole suite runs in
well under two minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import (DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear,
                     MultiHeadAttention)
from .losses import kl_loss, reconstruction_loss, total_loss, trailerness_loss
from .model import TrailerModel
from .shots import trailerness_ground_truth

_SUITE_TAG = 4

# minimum |relu input|; perturbations of h=1e-5 then never cross the kink
KINK_MARGIN = 1e-3
_MAX_REDRAWS = 8


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalarize(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, r))


# every builder takes a dedicated rng and returns (f, tensors_to_check);
# f rebuilds the forward graph each call
def _check_add(rng):
    x, y, r = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.add(x, y), r), [x, y]


def _check_add_broadcast(rng):
    x, y, r = _leaf(rng, 3, 4), _leaf(rng, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.add(x, y), r), [x, y]


def _check_sub(rng):
    x, y, r = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.sub(x, y), r), [x, y]


def _check_mul(rng):
    x, y, r = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.mul(x, y), r), [x, y]


def _check_neg(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.neg(x), r), [x]


def _check_scale(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(x / 2.5, r), [x]


def _check_power(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.power(x, 3.0), r), [x]


def _check_matmul(rng):
    a, b, r = _leaf(rng, 3, 5), _leaf(rng, 5, 2), _probe(rng, (3, 2))
    return lambda: _scalarize(ad.matmul(a, b), r), [a, b]


def _check_matmul_batched(rng):
    a, b, r = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 5, 2), _probe(rng, (2, 3, 2))
    return lambda: _scalarize(ad.matmul(a, b), r), [a, b]


def _check_exp(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.exp(x), r), [x]


def _check_log(rng):
    x = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    r = _probe(rng, (3, 4))
    return lambda: _scalarize(ad.log(x), r), [x]


def _check_sum(rng):
    x = _leaf(rng, 3, 4)
    return lambda: ad.tensor_sum(x), [x]


def _check_sum_axis(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (4,))
    return lambda: _scalarize(ad.tensor_sum(x, axis=0), r), [x]


def _check_mean(rng):
    x = _leaf(rng, 3, 4)
    return lambda: ad.tensor_mean(x), [x]


def _check_reshape(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (12,))
    return lambda: _scalarize(ad.reshape(x, (12,)), r), [x]


def _check_transpose(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (4, 3))
    return lambda: _scalarize(ad.transpose(x, (1, 0)), r), [x]


def _check_concat(rng):
    a, b, r = _leaf(rng, 2, 4), _leaf(rng, 3, 4), _probe(rng, (5, 4))
    return lambda: _scalarize(ad.concat([a, b], axis=0), r), [a, b]


def _check_stack(rng):
    a, b, r = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _probe(rng, (2, 3, 4))
    return lambda: _scalarize(ad.stack([a, b], axis=0), r), [a, b]


def _check_index_slice(rng):
    x, r = _leaf(rng, 4, 4), _probe(rng, (2, 4))
    return lambda: _scalarize(x[1:3], r), [x]


def _check_index_fancy(rng):
    x, r = _leaf(rng, 5, 4), _probe(rng, (3, 4))
    idx = np.array([0, 2, 2])  # repeated index exercises gradient accumulation
    return lambda: _scalarize(x[idx], r), [x]


def _check_sigmoid(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.sigmoid(x), r), [x]


def _check_relu(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.relu(x), r), [x]


def _check_softmax(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.softmax(x, axis=-1), r), [x]


def _check_softmax_masked(rng):
    x, r = _leaf(rng, 4, 4), _probe(rng, (4, 4))
    m = ad.causal_mask(4)
    return lambda: _scalarize(ad.softmax(x, axis=-1, mask=m), r), [x]


def _check_log_softmax(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(ad.log_softmax(x, axis=-1), r), [x]


def _check_layer_norm(rng):
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = _leaf(rng, 4)
    return lambda: _scalarize(ad.layer_norm(x, gamma, beta), r), [x, gamma, beta]


def _check_attention_core(rng):
    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    r = _probe(rng, (3, 4))
    return lambda: _scalarize(ad.multi_head_attention(q, k, v, 2), r), [q, k, v]


def _check_attention_core_masked(rng):
    q, k, v = _leaf(rng, 4, 4), _leaf(rng, 4, 4), _leaf(rng, 4, 4)
    r = _probe(rng, (4, 4))
    m = ad.causal_mask(4)
    return (lambda: _scalarize(ad.multi_head_attention(q, k, v, 2, mask=m), r),
            [q, k, v])


def _check_linear(rng):
    lin = Linear(4, 3, rng)
    x, r = _leaf(rng, 2, 4), _probe(rng, (2, 3))
    return lambda: _scalarize(lin(x), r), [x, lin.weight, lin.bias]


def _check_feed_forward(rng):
    ff = FeedForward(4, 6, rng)
    x, r = _leaf(rng, 2, 4), _probe(rng, (2, 4))
    return lambda: _scalarize(ff(x), r), [x] + ff.parameters()


def _check_layer_norm_module(rng):
    ln = LayerNorm(4)
    x, r = _leaf(rng, 2, 4), _probe(rng, (2, 4))
    return lambda: _scalarize(ln(x), r), [x] + ln.parameters()


def _check_attention_layer(rng):
    mha = MultiHeadAttention(4, 2, rng)
    x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
    return lambda: _scalarize(mha(x, x, x), r), [x] + mha.parameters()


def _make_encoder_layer_check(pre_norm):
    def build(rng):
        enc = EncoderLayer(4, 2, 8, rng, pre_norm=pre_norm)
        x, r = _leaf(rng, 3, 4), _probe(rng, (3, 4))
        return lambda: _scalarize(enc(x), r), [x] + enc.parameters()
    return build


def _make_decoder_layer_check(pre_norm):
    def build(rng):
        dec = DecoderLayer(4, 2, 8, rng, pre_norm=pre_norm)
        x, mem, r = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _probe(rng, (3, 4))
        m = ad.causal_mask(3)
        return lambda: _scalarize(dec(x, mem, m, None), r), [x, mem] + dec.parameters()
    return build


def _check_trailerness_loss(rng):
    s = _leaf(rng, 5)
    gt = rng.random(5)
    return lambda: trailerness_loss(ad.sigmoid(s), gt), [s]


def _check_reconstruction_loss(rng):
    pred, eos = _leaf(rng, 3, 4), _leaf(rng, 4)
    target = rng.standard_normal((2, 4))
    return lambda: reconstruction_loss(pred, target, eos), [pred, eos]


def _check_kl_loss(rng):
    pred, eos = _leaf(rng, 3, 4), _leaf(rng, 4)
    target = rng.standard_normal((2, 4))
    return lambda: kl_loss(pred, target, eos), [pred, eos]


def _check_total_loss(rng):
    s, pred, eos = _leaf(rng, 5), _leaf(rng, 3, 4), _leaf(rng, 4)
    gt = rng.random(5)
    target = rng.standard_normal((2, 4))
    return (lambda: total_loss(trailerness_loss(ad.sigmoid(s), gt),
                               reconstruction_loss(pred, target, eos),
                               kl_loss(pred, target, eos),
                               weights=(1.0, 0.5, 2.0))[0],
            [s, pred, eos])


def _check_model_total_loss(rng):
    """Full pipeline on a 2-shot movie at d=8: encode, fuse, decode, combined loss."""
    cfg = ModelConfig(d_model=8, num_heads=2, ff_dim=16, trailerness_layers=1,
                      context_layers=1, decoder_layers=1, max_len=16)
    seed = int(rng.integers(0, 2**31))
    model = TrailerModel(cfg, seed=seed)
    movie = rng.standard_normal((2, 8))
    trailer = rng.standard_normal((2, 8))
    gt = trailerness_ground_truth(movie, trailer)

    def f():
        enc = model.encode_single(movie)
        preds = model.decode_teacher_forced(enc.memory, trailer)
        loss, _ = total_loss(trailerness_loss(enc.scores, gt),
                             reconstruction_loss(preds, trailer, model.eos),
                             kl_loss(preds, trailer, model.eos))
        return loss

    names = [name for name, _ in model.named_parameters()]
    return f, model.parameters(), names


CHECKS = {
    "add": _check_add,
    "add_broadcast": _check_add_broadcast,
    "sub": _check_sub,
    "mul": _check_mul,
    "neg": _check_neg,
    "scale": _check_scale,
    "power": _check_power,
    "matmul": _check_matmul,
    "matmul_batched": _check_matmul_batched,
    "exp": _check_exp,
    "log": _check_log,
    "sum": _check_sum,
    "sum_axis": _check_sum_axis,
    "mean": _check_mean,
    "reshape": _check_reshape,
    "transpose": _check_transpose,
    "concat": _check_concat,
    "stack": _check_stack,
    "index_slice": _check_index_slice,
    "index_fancy": _check_index_fancy,
    "sigmoid": _check_sigmoid,
    "relu": _check_relu,
    "softmax": _check_softmax,
    "softmax_masked": _check_softmax_masked,
    "log_softmax": _check_log_softmax,
    "layer_norm": _check_layer_norm,
    "attention_core": _check_attention_core,
    "attention_core_masked": _check_attention_core_masked,
    "linear": _check_linear,
    "feed_forward": _check_feed_forward,
    "layer_norm_module": _check_layer_norm_module,
    "attention_layer": _check_attention_layer,
    "encoder_layer_post": _make_encoder_layer_check(False),
    "encoder_layer_pre": _make_encoder_layer_check(True),
    "decoder_layer_post": _make_decoder_layer_check(False),
    "decoder_layer_pre": _make_decoder_layer_check(True),
    "trailerness_loss": _check_trailerness_loss,
    "reconstruction_loss": _check_reconstruction_loss,
    "kl_loss": _check_kl_loss,
    "total_loss": _check_total_loss,
}


def _build_away_from_kinks(builder, check_index: int, seed: int):
    """Instantiate a check, redrawing until no relu input sits near its kink."""
    for redraw in range(_MAX_REDRAWS):
        rng = np.random.default_rng([seed, _SUITE_TAG, check_index, redraw])
        built = builder(rng)
        f = built[0]
        with ad.watch_kinks() as gaps:
            f()
        if not gaps or min(gaps) > KINK_MARGIN:
            return built
    return built  # vanishingly unlikely; let the check report what it sees


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    seeds: int
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


@dataclass
class SuiteReport:
    entries: list = field(default_factory=list)
    tolerance: float = 1e-4
    elapsed_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def table(self) -> str:
        width = max((len(e.name) for e in self.entries), default=4)
        lines = [f"{'check'.ljust(width)}  status  max_rel_error  seeds"]
        for e in self.entries:
            status = "PASS" if e.ok else "FAIL"
            lines.append(f"{e.name.ljust(width)}  {status}    "
                         f"{e.max_rel_error:.3e}      {e.seeds}")
        verdict = "PASS" if self.ok else "FAIL"
        lines.append(f"overall: {verdict} (max_rel_error={self.max_rel_error:.3e}, "
                     f"tol={self.tolerance:.1e}, {self.elapsed_seconds:.1f}s)")
        return "\n".join(lines)


def gradcheck_suite(seeds: int = 20, h: float = 1e-5, tol: float = 1e-4,
                    model_seeds: int = 3) -> SuiteReport:
    """Run every check over ``seeds`` random draws; the end-to-end model check
    runs over ``model_seeds`` (it perturbs every parameter, so it dominates cost)."""
    start = time.perf_counter()
    report = SuiteReport(tolerance=tol)

    with ad.precision(np.float64):
        for index, (name, builder) in enumerate(CHECKS.items()):
            entry = SuiteEntry(name, 0.0, 0, 0)
            for seed in range(seeds):
                f, tensors = _build_away_from_kinks(builder, index, seed)
                result = ad.grad_check(f, tensors, h=h, tol=tol)
                entry.max_rel_error = max(entry.max_rel_error, result.max_rel_error)
                entry.failures += sum(e.num_failed for e in result.entries)
                entry.seeds += 1
            report.entries.append(entry)

        entry = SuiteEntry("model_total_loss", 0.0, 0, 0)
        for seed in range(model_seeds):
            f, tensors, names = _build_away_from_kinks(
                _check_model_total_loss, len(CHECKS), seed)
            result = ad.grad_check(f, tensors, h=h, tol=tol, names=names)
            entry.max_rel_error = max(entry.max_rel_error, result.max_rel_error)
            entry.failures += sum(e.num_failed for e in result.entries)
            entry.seeds += 1
        report.entries.append(entry)

    report.elapsed_seconds = time.perf_counter() - start
    return report
