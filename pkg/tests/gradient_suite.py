"""Finite-difference gradient checks shared by the unit tests and the
acceptance suite.

Each check builds small float64 tensors, computes analytic gradients by
taping the op and replaying backward, and compares against central
differences of the same forward math run off-tape. Inputs are conditioned
away from non-differentiable points (relu kinks, pooling ties, similarity
thresholds) so the comparison is exact in the limit.
"""

import numpy as np

from hybridcnn import ops
from hybridcnn.fusion import intersect_features
from hybridcnn.tensor import GradTape, Tensor, backward
from hybridcnn.training import cross_entropy

from oracles import finite_difference, max_rel_error

H = 1e-4


def _project_loss(out, r):
    return ops.tensor_sum(ops.mul(out, r))


def _check(arrays, taped_forward, plain_forward):
    """Max relative error between taped-backward and finite differences."""
    tensors = [Tensor(a) for a in arrays]
    with GradTape() as tape:
        loss = taped_forward(*tensors)
    grads = backward(tape, loss)
    analytic = [grads[t] for t in tensors]
    numeric = finite_difference(lambda: plain_forward(*arrays), arrays, h=H)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    stride = 1 + seed % 2
    padding = "same" if seed % 3 == 0 else "valid"
    out_shape = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).shape
    r = rng.standard_normal(out_shape)

    def taped(xt, wt, bt):
        return _project_loss(ops.conv2d(xt, wt, bt, stride=stride, padding=padding), Tensor(r))

    def plain(xa, wa, ba):
        return float((ops.conv2d(Tensor(xa), Tensor(wa), Tensor(ba),
                                 stride=stride, padding=padding).data * r).sum())

    return _check([x, w, b], taped, plain)


def check_maxpool(seed):
    rng = np.random.default_rng(seed)
    # permutation of a spread grid: pairwise gaps far exceed the step h
    x = rng.permutation(np.linspace(0.0, 5.0, 2 * 6 * 6 * 2)).reshape(2, 6, 6, 2)
    r = rng.standard_normal((2, 3, 3, 2))

    def taped(xt):
        return _project_loss(ops.maxpool2d(xt, pool=2, stride=2), Tensor(r))

    def plain(xa):
        return float((ops.maxpool2d(Tensor(xa), pool=2, stride=2).data * r).sum())

    return _check([x], taped, plain)


def check_batchnorm_train(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 4, 2)) * 2.0
    gamma = rng.standard_normal(2) + 1.5
    beta = rng.standard_normal(2)
    r = rng.standard_normal((3, 4, 4, 2))

    def taped(xt, gt, bt):
        out = ops.batchnorm(xt, gt, bt, Tensor(np.zeros(2)), Tensor(np.ones(2)),
                            mode="train", eps=1e-3)
        return _project_loss(out, Tensor(r))

    def plain(xa, ga, ba):
        out = ops.batchnorm(Tensor(xa), Tensor(ga), Tensor(ba), Tensor(np.zeros(2)),
                            Tensor(np.ones(2)), mode="train", eps=1e-3)
        return float((out.data * r).sum())

    return _check([x, gamma, beta], taped, plain)


def check_dense(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))

    def taped(xt, wt, bt):
        return _project_loss(ops.dense(xt, wt, bt), Tensor(r))

    def plain(xa, wa, ba):
        return float((ops.dense(Tensor(xa), Tensor(wa), Tensor(ba)).data * r).sum())

    return _check([x, w, b], taped, plain)


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 7))
    x[np.abs(x) < 0.05] += 0.1  # keep clear of the kink
    r = rng.standard_normal((5, 7))

    def taped(xt):
        return _project_loss(ops.relu(xt), Tensor(r))

    def plain(xa):
        return float((ops.relu(Tensor(xa)).data * r).sum())

    return _check([x], taped, plain)


def check_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 4)) * 2.0
    labels = rng.integers(0, 4, size=6)

    def taped(lt):
        return cross_entropy(ops.softmax(lt), labels)

    def plain(la):
        return float(cross_entropy(ops.softmax(Tensor(la)), labels).item())

    return _check([logits], taped, plain)


def check_intersect_accepted_path(seed):
    rng = np.random.default_rng(seed)
    tau = 0.0
    while True:
        a = rng.standard_normal((2, 3, 3, 4))
        b = rng.standard_normal((2, 3, 3, 4))
        _, mask = intersect_features(Tensor(a), Tensor(b), tau)
        dots = np.einsum("nhwc,nhwc->nc", a, b)
        sims = dots / (np.sqrt(np.einsum("nhwc,nhwc->nc", a, a))
                       * np.sqrt(np.einsum("nhwc,nhwc->nc", b, b)))
        if np.abs(sims - tau).min() > 0.02 and mask.any():
            break
    r = rng.standard_normal(a.shape)

    def taped(at, bt):
        out, _ = intersect_features(at, bt, tau)
        return _project_loss(out, Tensor(r))

    def plain(aa, ba):
        out, _ = intersect_features(Tensor(aa), Tensor(ba), tau)
        return float((out.data * r).sum())

    return _check([a, b], taped, plain)


PRIMITIVES = {
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool,
    "batchnorm_train": check_batchnorm_train,
    "dense": check_dense,
    "relu": check_relu,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "intersect_features": check_intersect_accepted_path,
}


def run_suite(seeds=20):
    """Max relative FD error per primitive over `seeds` random seeds."""
    return {name: max(fn(seed) for seed in range(seeds))
            for name, fn in PRIMITIVES.items()}
