"""Finite-difference self-test over randomly shaped networks and losses.

Each configuration draws layer sizes, a batch and a loss, then compares the
hand-written backward pass against central differences for every
parameter. Dropout masks are drawn once per configuration and held fixed
while differencing.
"""
from __future__ import annotations

from dropda import diffcore as dc
from dropda.adapt import joint_gradients, joint_loss
from dropda.data import DomainBatch
from dropda.network import NetworkParams, Stack

EPS = 1e-5


def jitter_biases(params: NetworkParams, rng, scale=0.1):
    """Zero biases put all-dead rows exactly on a ReLU kink; move them off it."""
    for group in (params.extractor, params.classifier, params.discriminator):
        for layer in group.layers:
            layer.bias[:] = rng.normal(0.0, scale, size=layer.bias.shape)


def _classifier_case(rng):
    """Extractor + classifier under softmax cross-entropy."""
    dims = [int(d) for d in rng.integers(2, 6, size=rng.integers(2, 4))]
    n_classes = int(rng.integers(2, 5))
    ext = Stack.build(dims, rng, relu_out=True)
    clf = Stack.build([dims[-1], n_classes], rng)
    for layer in ext.layers + clf.layers:
        layer.bias[:] = rng.normal(0.0, 0.1, size=layer.bias.shape)
    x = rng.normal(size=(int(rng.integers(1, 6)), dims[0]))
    y = rng.integers(0, n_classes, size=len(x))

    def f():
        loss, g = dc.softmax_cross_entropy(clf.forward(ext.forward(x)), y)
        g, gc = clf.backward(g)
        _, ge = ext.backward(g)
        return loss, ge + gc

    return f, ext.params() + clf.params()


def _bce_dropout_case(rng):
    """Dense-ReLU-dropout-dense discriminator under sigmoid BCE."""
    din, hid = int(rng.integers(2, 6)), int(rng.integers(2, 7))
    l1, l2 = dc.DenseLayer.init(din, hid, rng), dc.DenseLayer.init(hid, 1, rng)
    l1.bias[:] = rng.normal(0.0, 0.1, size=hid)
    x = rng.normal(size=(int(rng.integers(1, 6)), din))
    t = rng.integers(0, 2, size=len(x)).astype(float)
    mask = dc.sample_dropout_mask(hid, float(rng.choice([0.0, 0.3, 0.5])), rng)

    def f():
        pre = dc.dense_forward(x, l1)
        a = dc.apply_dropout(dc.relu(pre), mask)
        loss, g = dc.sigmoid_bce(dc.dense_forward(a, l2), t)
        g, gw2, gb2 = dc.dense_backward(g, l2, a)
        g = dc.relu_backward(dc.dropout_backward(g, mask), pre)
        _, gw1, gb1 = dc.dense_backward(g, l1, x)
        return loss, [gw1, gb1, gw2, gb2]

    return f, l1.params() + l2.params()


def _joint_case(rng):
    """The full joint objective; extractor gradient checked against L_c + lam * L_d."""
    n_classes = int(rng.integers(2, 4))
    params = NetworkParams.build(2, n_classes, rng, extractor_hidden=(4, 3),
                                 discriminator_hidden=(5,), dropout=0.5)
    jitter_biases(params, rng)
    ns, nt = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    batch = DomainBatch(rng.normal(size=(ns, 2)), rng.integers(0, n_classes, size=ns),
                        rng.normal(size=(nt, 2)))
    k = int(rng.integers(1, 4))
    lam = float(rng.uniform(0.1, 2.0))
    mask_seed = int(rng.integers(2**31))

    def f():
        lc, ld, cache = joint_loss(batch, params, k, dc.make_rng(mask_seed))
        g = joint_gradients(cache, params, lam, reverse=False)
        # the discriminator gradient is that of L_d alone
        return lc + lam * ld, g["extractor"] + g["classifier"] + [lam * x for x in g["discriminator"]]

    return f, params.extractor.params() + params.classifier.params() + params.discriminator.params()


CASES = (_classifier_case, _bce_dropout_case, _joint_case)


def run_suite(seed: int = 0, n_configs: int = 24, epsilon: float = EPS) -> tuple[float, int]:
    """Return ``(worst relative error, number of configurations)``."""
    rng = dc.make_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        f, params = CASES[i % len(CASES)](rng)
        worst = max(worst, dc.finite_difference_check(f, params, epsilon))
    return worst, n_configs
