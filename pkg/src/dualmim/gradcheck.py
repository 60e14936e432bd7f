"""Central finite-difference gradient checking.

The oracle perturbs raw float32 buffers and re-runs the forward pass; it
never touches the backward rules it is checking. Pass criterion per
element: |ad - fd| <= max(abs_floor, rel_tol * max(|ad|, |fd|)).

The difference quotient at float32 carries rounding noise of roughly
eps_f32 * |intermediates| / (2 * eps), so every check loss here is a mean
with |loss| ~ 1 and moderate intermediate magnitudes; that keeps the noise
well below the tolerance floor. The composed model loss cannot be
conditioned that way (its tempered softmax scales logits by 10), so the
composed check is done against an independent float64 forward
reimplementation in the test suite; `composed_setup` packages everything
that oracle needs.
"""

import numpy as np

from . import losses as losses_mod
from . import pseudolabel as pl
from .config import TrainConfig
from .data import Batch
from .optim import AdamW
from .tensor import Tensor, gelu, layernorm, softmax
from .train import Trainer
from .vit import ProjectionHeadConfig, ViTConfig

EPS = 1e-3
REL_TOL = 1e-3
ABS_FLOOR = 1e-4


def finite_diff(f, x, eps=EPS):
    """Central finite differences of scalar f over every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def max_violation(ad, fd, rel_tol=REL_TOL, abs_floor=ABS_FLOOR):
    """Largest tolerance-normalized error; <= 1 means the check passes."""
    ad = np.asarray(ad, dtype=np.float64)
    diff = np.abs(ad - fd)
    scale = np.maximum(abs_floor, rel_tol * np.maximum(np.abs(ad), np.abs(fd)))
    return float((diff / scale).max()) if diff.size else 0.0


def check_grads(build_loss, tensors, eps=EPS, rel_tol=REL_TOL,
                abs_floor=ABS_FLOOR):
    """Compare backward() grads of `build_loss()` against finite differences.

    `tensors`: dict name -> Tensor whose grads are checked. Returns the max
    violation across all of them (pass iff <= 1).
    """
    for t in tensors.values():
        t.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        fd = finite_diff(lambda: float(build_loss().data), t.data, eps)
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_violation(ad, fd, rel_tol, abs_floor))
    return worst


def tiny_config(prototypes=8):
    """16-token desk-minimum config used by the composed-loss check."""
    cfg = TrainConfig(
        model=ViTConfig(image_size=16, patch_size=4, embed_dim=8, depth=2,
                        num_heads=2, mlp_ratio=2.0, decoder_depth=1,
                        decoder_dim=8),
        head=ProjectionHeadConfig(num_shared_layers=2, hidden_dim=16,
                                  output_dim=prototypes),
    )
    cfg.optim.batch_size = 2
    cfg.optim.total_epochs = 2
    cfg.optim.warmup_epochs = 1
    return cfg.validate()


def composed_setup(seed=0):
    """Build the tiny model, one batch, and a frozen-target loss closure.

    Teacher targets and the patch matching are computed once and frozen,
    matching the stop-gradient semantics of the training objective, so the
    returned `build()` is a pure function of the student parameters.

    Returns (trainer, batch, ctx, match, build) where `ctx` is the frozen
    prepare_step output and `build()` re-runs the student forward and
    returns the total loss tensor.
    """
    cfg = tiny_config()
    trainer = Trainer(cfg, iters_per_epoch=1)
    rng = np.random.default_rng(seed)
    imgs = rng.normal(0, 1, (2, 16, 16, 3)).astype(np.float32)
    batch = Batch(simple=imgs, complex=imgs[::-1].copy(),
                  labels=np.zeros(2, np.uint8),
                  record_indices=np.arange(2))
    ctx = trainer.prepare_step(batch, 0, 0)
    _, match = trainer.compute_loss(batch, *ctx, train=False)

    def build():
        report, _ = trainer.compute_loss(batch, *ctx, frozen_match=match,
                                         train=False)
        return report.total_tensor

    return trainer, batch, ctx, match, build


def op_suite(seed=0):
    """Finite-difference checks of every differentiable op on random shapes.

    Returns a list of (name, max_violation) pairs; each passes iff <= 1.
    """
    rng = np.random.default_rng(seed)
    results = []

    def randn(*shape, scale=1.0):
        return Tensor((scale * rng.normal(0, 1, shape)).astype(np.float32),
                      requires_grad=True)

    def const(*shape):
        return Tensor(rng.normal(0, 1, shape).astype(np.float32))

    a, b = randn(4, 5, scale=0.5), randn(5, 3, scale=0.5)
    results.append(("matmul", check_grads(
        lambda: ((a @ b) * (a @ b)).mean() * 0.1, {"a": a, "b": b})))

    x, g, be = randn(3, 6), randn(6), randn(6)
    results.append(("layernorm", check_grads(
        lambda: (layernorm(x, g, be) * layernorm(x, g, be)).mean() * 0.25,
        {"x": x, "gamma": g, "beta": be})))

    x = randn(4, 7)
    w = const(4, 7)
    results.append(("softmax", check_grads(
        lambda: (softmax(x, axis=-1) * w).mean(), {"x": x})))

    x = randn(3, 5)
    results.append(("gelu", check_grads(
        lambda: (gelu(x) * gelu(x)).mean(), {"x": x})))

    x, w = randn(2, 6, scale=0.5), const(2, 6)
    results.append(("exp", check_grads(
        lambda: (x.exp() * w).mean(), {"x": x})))

    x, w = randn(2, 6), const(2, 6)
    results.append(("log", check_grads(
        lambda: ((x * x + 1.5).log() * w).mean(), {"x": x})))

    x, y, w = randn(2, 6), randn(2, 6), const(2, 6)
    results.append(("div", check_grads(
        lambda: (x / (y * y + 2.0) * w).mean(), {"x": x, "y": y})))

    x = randn(3, 4)
    results.append(("take_concat", check_grads(
        lambda: (x.take(np.array([0, 2, 2]), axis=1) *
                 x.take(np.array([1, 3, 0]), axis=1)).mean(), {"x": x})))

    t = randn(2, 4, 8)
    target = rng.normal(0, 1, (2, 3, 8)).astype(np.float32)
    results.append(("cosine_recon", check_grads(
        lambda: losses_mod.cosine_recon_loss(
            t.take(np.array([1, 2, 3]), axis=1),
            losses_mod.normalize_targets(target)), {"t": t})))

    s = randn(3, 4, scale=0.5)
    p = np.abs(rng.normal(0, 1, (3, 4))).astype(np.float32)
    p /= p.sum(axis=1, keepdims=True)
    results.append(("softmax_cross_entropy", check_grads(
        lambda: losses_mod.cross_entropy(p, pl.student_assign(s, 1.0)) * 0.25,
        {"s": s})))

    return results


def adamw_convergence(steps=500, lr=0.1):
    """Scalar quadratic f(w) = w^2 minimized by AdamW; returns final |w|^2."""
    w = Tensor(np.float32(1.0), requires_grad=True)
    opt = AdamW({"w": w}, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        opt.zero_grad()
        loss = w * w
        loss.backward()
        opt.step()
    return float(w.data ** 2)


def run_suite(verbose=True):
    """Per-op finite-difference checks plus optimizer convergence.

    Returns True if all checks pass. The composed-model check against the
    float64 reference forward lives in the test suite.
    """
    results = op_suite()
    ok = True
    for name, viol in results:
        passed = viol <= 1.0
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}: "
                  f"max violation {viol:.4f} (<= 1.0)")
    q = adamw_convergence()
    passed = q < 1e-4
    ok = ok and passed
    if verbose:
        print(f"{'PASS' if passed else 'FAIL'} adamw_quadratic: "
              f"final w^2 {q:.2e} (< 1e-4)")
    return ok
