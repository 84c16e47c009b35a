"""Single-scalar surrogate objectives whose tape gradient IS the estimator.

Each surrogate is one TapeScalar built from K reparameterized samples,
with the gradient-stopped quantities entering as plain numbers instead
of tape nodes.  Three freeze channels cover all six kinds:

  weight coefficients   exp(log w_i - log sum w) and powers, computed
                        numerically; the coefficient never contributes
                        a gradient
  z frozen              densities evaluated at numeric z: only the
                        direct parameter channel survives (score / wake
                        terms)
  parameters frozen     densities evaluated with numeric parameters but
                        live z: only the sample channel survives (path
                        terms)

The frozen quantities are evaluated from `stops_from`, which defaults
to the live parameter vector.  Because the density code is generic over
floats and tape nodes, the default reproduces exactly what stop
gradient nodes would compute, while a caller probing the value at
perturbed live parameters can hold `stops_from` at a base point.  That
makes every surrogate an ordinary smooth function of its live
parameters, so central finite differences of `.value` are a valid
oracle for `.gradient()`.

All six objectives are ascent objectives.  For the two wake-sleep kinds
the direct estimators follow the descent convention, so their surrogate
gradient is exactly the negated direct gradient; the equivalence tests
carry that sign.
"""

import numpy as np

from ..gaussian import DiagGaussian, NoiseBatch, log_prob, sample_reparam
from ..models.params import lift
from ..tape import TapeGraph, tape_sum
from .weights import normalized_log_weights

SURROGATE_KINDS = ("iwae", "dreg-iwae", "rws", "dreg-rws", "stl", "dreg-alpha")


class SurrogateLoss:
    """The assembled objective plus the lifted parameters behind it."""

    def __init__(self, kind, root, lifted, alpha=None):
        self.kind = kind
        self.root = root
        self.lifted = lifted
        self.alpha = alpha

    @property
    def value(self):
        return self.root.value

    def gradient(self):
        """Flat gradient over all parameter coordinates, layout order."""
        grads = self.lifted.graph.backward(self.root)
        return self.lifted.grad_vector(grads)


def surrogate_loss(kind, model, params, x, eps, alpha=None, stops_from=None):
    """Build one surrogate objective on a fresh tape.

    Returns a SurrogateLoss; its `.gradient()` is the estimator for all
    parameters at once.  Works for disjoint and shared role masks alike,
    which is the point: the freeze placements, not the role bookkeeping,
    decide where gradients flow.
    """
    if kind not in SURROGATE_KINDS:
        raise ValueError(f"unknown surrogate kind {kind!r}")
    if kind == "dreg-alpha":
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ValueError("dreg-alpha needs alpha in [0, 1]")
    elif alpha is not None:
        raise ValueError(f"alpha is meaningless for kind {kind!r}")
    if not isinstance(eps, NoiseBatch):
        raise TypeError("eps must be a NoiseBatch")
    frozen = params if stops_from is None else stops_from

    # numeric side: everything a stop-gradient would hold constant
    q_star = model.inference(frozen, x)
    k = eps.k
    z_star = [sample_reparam(q_star, eps.eps[i]) for i in range(k)]
    lw_star = np.array(
        [
            model.log_joint(frozen, x, z) - log_prob(q_star, z)
            for z in z_star
        ]
    )
    log_wt = normalized_log_weights(lw_star)
    wt = np.exp(log_wt)
    wt_sq = np.exp(2.0 * log_wt)
    q_frozen = DiagGaussian(mean=list(q_star.mean), log_scale=list(q_star.log_scale))

    # live side
    graph = TapeGraph()
    lifted = lift(graph, params)
    q = model.inference(lifted, x)

    def z_live(i):
        return sample_reparam(q, eps.eps[i])

    def lw_params_frozen(i):
        # parameter channels frozen, the sample channel live
        z = z_live(i)
        return model.log_joint(frozen, x, z) - log_prob(q_frozen, z)

    if kind == "iwae":
        terms = []
        for i in range(k):
            z = z_live(i)
            terms.append(wt[i] * (model.log_joint(lifted, x, z) - log_prob(q, z)))
    elif kind == "stl":
        terms = []
        for i in range(k):
            z = z_live(i)
            terms.append(wt[i] * (model.log_joint(lifted, x, z) - log_prob(q_frozen, z)))
    elif kind == "rws":
        terms = [
            wt[i] * (model.log_joint(lifted, x, z_star[i]) + log_prob(q, z_star[i]))
            for i in range(k)
        ]
    elif kind == "dreg-iwae":
        terms = [wt[i] * model.log_joint(lifted, x, z_star[i]) for i in range(k)]
        terms += [wt_sq[i] * lw_params_frozen(i) for i in range(k)]
    elif kind == "dreg-rws":
        terms = [wt[i] * model.log_joint(lifted, x, z_star[i]) for i in range(k)]
        terms += [-(wt_sq[i] - wt[i]) * lw_params_frozen(i) for i in range(k)]
    else:  # dreg-alpha
        terms = [wt[i] * model.log_joint(lifted, x, z_star[i]) for i in range(k)]
        terms += [
            (alpha * wt[i] + (1.0 - 2.0 * alpha) * wt_sq[i]) * lw_params_frozen(i)
            for i in range(k)
        ]

    return SurrogateLoss(kind, tape_sum(terms), lifted, alpha=alpha)


def surrogate_gradient_split(loss, params):
    """Convenience split of a flat surrogate gradient into (phi, theta)."""
    flat = loss.gradient()
    return flat[params.phi_indices], flat[params.theta_indices]
