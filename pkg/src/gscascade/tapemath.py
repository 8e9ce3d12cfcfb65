"""Quaternion / rotation kernels expressed in autodiff-tape ops.

These mirror the plain-numpy functions in `geometry` (which double as their
test oracles) but operate on `autodiff.Tensor`s so gradients flow through
them. Piecewise definitions (branch selection, hemisphere signs, norm floors)
take their branch from the forward values and treat it as constant, which is
the correct almost-everywhere derivative.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

_QUAT_CONJ_SIGNS = np.array([1.0, -1.0, -1.0, -1.0])


def safe_norm(x, floor=1e-12):
    """Euclidean norm over the last axis; gradient 0 below the floor."""
    ssq = ad.tsum(ad.square(x), axis=-1)
    return ad.sqrt(ad.clamp_min(ssq, floor * floor))


def quat_normalize_t(q):
    return ad.mul(q, ad.reshape(1.0 / safe_norm(q), q.shape[:-1] + (1,)))


def quat_conjugate_t(q):
    return ad.mul(q, ad.constant(_QUAT_CONJ_SIGNS))


def quat_multiply_t(a, b):
    aw, ax, ay, az = ad.unstack_last(a)
    bw, bx, by, bz = ad.unstack_last(b)
    return ad.stack_last(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_mat_t(q):
    """Unit quaternion (..., 4) -> rotation matrix (..., 3, 3) on the tape."""
    w, x, y, z = ad.unstack_last(q)
    two = 2.0
    row0 = ad.stack_last([1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)])
    row1 = ad.stack_last([two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x)])
    row2 = ad.stack_last([two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y)])
    rows = ad.stack_last([row0, row1, row2])  # (..., 3 cols, 3 rows)
    return ad.transpose_last2(rows)


def mat_to_quat_t(R):
    """Rotation matrix -> unit quaternion with w >= 0, on the tape.

    Same Shepperd branch selection as geometry.matrix_to_quat; the chosen
    branch and hemisphere sign are constants of the backward pass.
    """
    flat = ad.reshape(R, R.shape[:-2] + (9,))
    e = ad.unstack_last(flat)
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = e
    tr = r00 + r11 + r22

    cands = []
    t0 = ad.clamp_min(1.0 + tr, 1e-12)
    s0 = ad.sqrt(t0) * 2.0
    cands.append(ad.stack_last([0.25 * s0, (r21 - r12) / s0, (r02 - r20) / s0, (r10 - r01) / s0]))
    t1 = ad.clamp_min(1.0 + r00 - r11 - r22, 1e-12)
    s1 = ad.sqrt(t1) * 2.0
    cands.append(ad.stack_last([(r21 - r12) / s1, 0.25 * s1, (r01 + r10) / s1, (r02 + r20) / s1]))
    t2 = ad.clamp_min(1.0 - r00 + r11 - r22, 1e-12)
    s2 = ad.sqrt(t2) * 2.0
    cands.append(ad.stack_last([(r02 - r20) / s2, (r01 + r10) / s2, 0.25 * s2, (r12 + r21) / s2]))
    t3 = ad.clamp_min(1.0 - r00 - r11 + r22, 1e-12)
    s3 = ad.sqrt(t3) * 2.0
    cands.append(ad.stack_last([(r10 - r01) / s3, (r02 + r20) / s3, (r12 + r21) / s3, 0.25 * s3]))

    scores = np.stack([tr.value, r00.value, r11.value, r22.value], axis=-1)
    pick = np.argmax(scores, axis=-1)
    q = None
    for b in range(4):
        mask = (pick == b)[..., None]
        term = ad.where(mask, cands[b], 0.0)
        q = term if q is None else q + term
    q = quat_normalize_t(q)
    hemi = np.where(q.value[..., :1] < 0.0, -1.0, 1.0)
    return ad.mul(q, ad.constant(hemi))
