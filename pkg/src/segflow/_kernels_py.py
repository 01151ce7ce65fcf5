"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Conditional on mixture component ``j`` (mean ``m``, diagonal variance ``s2``),
the noised sample ``x_t = (1-t) x0 + t eps`` is Gaussian with mean ``(1-t) m``
and variance ``V = (1-t)^2 s2 + t^2``. The regression target ``eps - x0`` has
covariance ``t - (1-t) s2`` with ``x_t``, hence

    E[eps - x0 | x_t = x, j] = (t - (1-t) s2) / V * (x - (1-t) m) - m

and the marginal velocity is the posterior-weighted average over components.
"""

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def _softmax_rows(logl):
    logl = logl - logl.max(axis=1, keepdims=True)
    w = np.exp(logl)
    return w / w.sum(axis=1, keepdims=True)


def gmm_velocity_batch(x, t, shift, log_weights, means, variances):
    s = 1.0 - t
    m = means[None, :, :] + shift[:, None, :]  # (n, J, d)
    var = s * s * variances[None, :, :] + t * t
    r = x[:, None, :] - s * m
    logl = log_weights[None, :] - 0.5 * np.sum(LOG_2PI + np.log(var) + r * r / var, axis=2)
    post = _softmax_rows(logl)
    per_comp = (t - s * variances[None, :, :]) / var * r - m
    return np.einsum("nj,njd->nd", post, per_comp)


def gmm_logpdf_batch(x, shift, log_weights, means, variances):
    r = x[:, None, :] - means[None, :, :] - shift[:, None, :]
    logl = log_weights[None, :] - 0.5 * np.sum(LOG_2PI + np.log(variances)[None] + r * r / variances[None],
                                               axis=2)
    lmax = logl.max(axis=1)
    finite = np.isfinite(lmax)
    out = np.full(x.shape[0], -np.inf)
    out[finite] = lmax[finite] + np.log(np.sum(np.exp(logl[finite] - lmax[finite, None]), axis=1))
    return out
