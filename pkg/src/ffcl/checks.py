"""The finite-difference gradient suite behind ``ffcl gradcheck``.

Each check draws fresh random float64 inputs per trial and keeps going until
it has compared at least ``min_probes`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .contrastive import cosine_embedding_loss
from .gradcheck import GradReport, check_params
from .network import BlockSpec, build_model, classify, embed_at_block, embed_global, init_head
from .tensor import Tensor

F64 = np.float64

# small enough to evaluate fast, but covering conv, residual, stride 2 and linear blocks
CHECK_BLOCKS = (
    BlockSpec("conv", 3, 3, 1),
    BlockSpec("conv", 3, 3, 1, use_residual=True),
    BlockSpec("conv", 4, 3, 2),
    BlockSpec("linear", 5),
)
CHECK_INPUT = (1, 8, 8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_error: float
    probes: int
    skipped: int
    elapsed: float
    failure: str | None = None


def _t(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=F64)


def _away_from_zero(rng, *shape, margin=1e-2) -> Tensor:
    mag = rng.uniform(margin, 2.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True, dtype=F64)


def _project(out: Tensor, rng) -> Tensor:
    """A scalar with a non-trivial gradient: sum(out * R) for fixed random R."""
    r = Tensor(rng.uniform(-1, 1, size=out.shape), dtype=out.dtype)
    return T.sum_(T.mul(out, r))


# each case builder returns (loss_fn, params) for one trial
def _proj_case(build: Callable, rng, **params):
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(build(**params), np.random.default_rng(seed))), params


def _cases():
    return {
        "add": lambda rng: _proj_case(lambda a, b: T.add(a, b), rng, a=_t(rng, 3, 4), b=_t(rng, 3, 4)),
        "sub": lambda rng: _proj_case(lambda a, b: T.sub(a, b), rng, a=_t(rng, 3, 4), b=_t(rng, 3, 4)),
        "mul": lambda rng: _proj_case(lambda a, b: T.mul(a, b), rng, a=_t(rng, 3, 4), b=_t(rng, 3, 4)),
        "relu": lambda rng: _proj_case(lambda x: T.relu(x), rng, x=_away_from_zero(rng, 4, 5)),
        "sigmoid": lambda rng: _proj_case(lambda x: T.sigmoid(x), rng, x=_t(rng, 4, 5)),
        "sum": lambda rng: _proj_case(lambda x: T.sum_(x, axis=1), rng, x=_t(rng, 3, 4, 2)),
        "mean": lambda rng: _proj_case(lambda x: T.mean(x, axis=(0, 2)), rng, x=_t(rng, 3, 4, 2)),
        "reshape": lambda rng: _proj_case(lambda x: T.reshape(x, (4, 6)), rng, x=_t(rng, 2, 3, 4)),
        "transpose": lambda rng: _proj_case(lambda x: T.transpose(x), rng, x=_t(rng, 3, 5)),
        "take_rows": lambda rng: _proj_case(lambda x: T.take_rows(x, slice(1, 3)), rng, x=_t(rng, 4, 3)),
        "concat": lambda rng: _proj_case(lambda a, b: T.concat([a, b]), rng, a=_t(rng, 2, 3), b=_t(rng, 3, 3)),
        "matmul": lambda rng: _proj_case(lambda a, b: T.matmul(a, b), rng, a=_t(rng, 3, 4), b=_t(rng, 4, 2)),
        "bias_add": lambda rng: _proj_case(lambda x, b: T.bias_add(x, b), rng, x=_t(rng, 2, 3, 2, 2), b=_t(rng, 3)),
        "conv2d": lambda rng: _proj_case(
            lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), rng,
            x=_t(rng, 2, 2, 5, 5), w=_t(rng, 3, 2, 3, 3), b=_t(rng, 3)),
        "global_avg_pool": lambda rng: _proj_case(lambda x: T.global_avg_pool(x), rng, x=_t(rng, 2, 3, 3, 4)),
        "cosine_similarity": lambda rng: _proj_case(lambda a, b: T.cosine_similarity(a, b), rng,
                                                    a=_t(rng, 4, 6), b=_t(rng, 4, 6)),
        "bce_loss": lambda rng: _bce_case(rng),
        "pair_loss_same": lambda rng: _pair_loss_case(rng, same=True),
        "pair_loss_different": lambda rng: _pair_loss_case(rng, same=False),
        **{f"local_loss_block{i}": (lambda rng, i=i: _local_case(rng, i)) for i in range(len(CHECK_BLOCKS))},
        "global_loss": _global_case,
        "bce_sigmoid_head": _head_case,
    }


def _bce_case(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=6), requires_grad=True, dtype=F64)
    y = rng.integers(0, 2, size=6)
    return (lambda: T.bce_loss(p, y)), {"p": p}


def _unit_rows(rng, b, d) -> Tensor:
    v = rng.normal(size=(b, d))
    return Tensor(v / np.linalg.norm(v, axis=1, keepdims=True), requires_grad=True, dtype=F64)


def _pair_loss_case(rng, same: bool):
    e1, e2 = _unit_rows(rng, 4, 5), _unit_rows(rng, 4, 5)
    if not same:
        # keep pairs on the active side of max(0, cos) so every row carries gradient
        flip = np.sign((e1.data * e2.data).sum(axis=1))
        e2.data *= np.where(flip == 0, 1, flip)[:, None]
    flags = np.full(4, same)
    return (lambda: cosine_embedding_loss(e1, e2, flags)), {"e1": e1, "e2": e2}


def _pair_inputs(rng, b=3):
    x = Tensor(rng.uniform(0, 1, size=(2 * b, *CHECK_INPUT)), dtype=F64)
    flags = np.arange(b) % 2 == 0
    return x, flags, b


def _model(rng):
    return build_model(CHECK_BLOCKS, CHECK_INPUT, int(rng.integers(1 << 31))).astype(F64)


def _local_case(rng, i: int):
    model = _model(rng)
    x, flags, b = _pair_inputs(rng)

    def loss():
        e = embed_at_block(model, i, x)
        return cosine_embedding_loss(T.take_rows(e, slice(0, b)), T.take_rows(e, slice(b, 2 * b)), flags)

    return loss, {f"block{i}.weight": model.blocks[i].weight, f"block{i}.bias": model.blocks[i].bias}


def _global_case(rng):
    model = _model(rng)
    x, flags, b = _pair_inputs(rng)

    def loss():
        e = embed_global(model, x)
        return cosine_embedding_loss(T.take_rows(e, slice(0, b)), T.take_rows(e, slice(b, 2 * b)), flags)

    return loss, dict(model.named_parameters())


def _head_case(rng):
    head = init_head(6, seed=int(rng.integers(1 << 31)))
    head.weight = Tensor(head.weight.data, requires_grad=True, dtype=F64)
    head.bias = Tensor(rng.uniform(-0.5, 0.5, size=1), requires_grad=True, dtype=F64)
    emb = _t(rng, 5, 6, lo=0.0, hi=1.0)
    y = rng.integers(0, 2, size=5)
    return (lambda: T.bce_loss(classify(head, emb), y)), {"embedding": emb, "head.weight": head.weight,
                                                          "head.bias": head.bias}


CHECK_NAMES = tuple(_cases())


def run_check(name: str, seed: int = 0, min_probes: int = 100, probes_per_param: int = 12,
              eps: float = 3e-5, tol: float = 1e-3, max_trials: int = 200) -> CheckResult:
    builder = _cases()[name]
    rng = np.random.default_rng([seed, CHECK_NAMES.index(name)])
    probes = skipped = 0
    worst, elapsed, failure = 0.0, 0.0, None
    for trial in range(max_trials):
        loss_fn, params = builder(rng)
        rep: GradReport = check_params(loss_fn, params, eps=eps, tol=tol, probes=probes_per_param,
                                       seed=int(rng.integers(1 << 31)))
        probes += rep.probes
        skipped += rep.skipped
        elapsed += rep.elapsed
        worst = max(worst, rep.worst)
        if not rep.passed:
            failure = f"trial {trial}: {rep.failure}"
            break
        if probes >= min_probes:
            break
    if failure is None and probes < min_probes:
        failure = f"only {probes} usable probes after {max_trials} trials"
    return CheckResult(name, failure is None, worst, probes, skipped, elapsed, failure)


def run_suite(seed: int = 0, min_probes: int = 100, names=None) -> list[CheckResult]:
    return [run_check(n, seed, min_probes) for n in (names or CHECK_NAMES)]
