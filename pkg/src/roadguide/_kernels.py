"""Scalar numeric kernels shared by the reference stepper and the compiled engine.

All functions are numba-compiled and callable from plain Python as well.
Driver parameters travel as a flat float64 row; the ``P_*`` constants index it.
"""

import math

import numba
import numpy as np

P_V0 = 0
P_T = 1
P_A = 2
P_B = 3
P_DELTA = 4
P_S0 = 5
P_LEN = 6
P_POLITE = 7
P_DA = 8
P_BSAFE = 9
N_PARAMS = 10

# Truncation of the perception noise, in standard deviations. Keeps noise
# bounded so that lookahead scans can stop early without changing results.
NOISE_CLIP = 6.0

PURPOSE_LOCAL = 0
PURPOSE_ROADSIDE = 1
ROADSIDE_OBSERVER = np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit(cache=True)
def idm_raw(v, dv, s, prow):
    """Unclamped IDM acceleration for speed ``v``, approach rate ``dv``, gap ``s``."""
    a = prow[P_A]
    dyn = v * prow[P_T] + v * dv / (2.0 * math.sqrt(a * prow[P_B]))
    s_star = prow[P_S0] + dyn
    return a * (1.0 - (v / prow[P_V0]) ** prow[P_DELTA] - (s_star / s) ** 2)


@numba.njit(cache=True)
def idm_clamped(v, dv, s, prow, emergency):
    return max(idm_raw(v, dv, s, prow), -emergency)


@numba.njit(cache=True)
def lane_gain(v, ego_len, ego_row, a_old, lead_gap, lead_v,
              has_fol, fol_gap, fol_v, fol_row, old_fol_term, emergency):
    """Evaluate one candidate target lane.

    Returns ``(safe, incentive, a_new)``. ``lead_gap`` is ``inf`` when the
    target lane has no perceived leader. ``old_fol_term`` is the politeness
    term for the follower left behind in the current lane.
    """
    if math.isinf(lead_gap):
        a_new = idm_clamped(v, 0.0, lead_gap, ego_row, emergency)
    else:
        a_new = idm_clamped(v, v - lead_v, lead_gap, ego_row, emergency)
    new_fol_term = 0.0
    safe = True
    if has_fol:
        a_nf_new = idm_clamped(fol_v, fol_v - v, fol_gap, fol_row, emergency)
        if math.isinf(lead_gap):
            a_nf_old = idm_clamped(fol_v, 0.0, math.inf, fol_row, emergency)
        else:
            a_nf_old = idm_clamped(fol_v, fol_v - lead_v,
                                   fol_gap + ego_len + lead_gap, fol_row, emergency)
        new_fol_term = a_nf_new - a_nf_old
        safe = a_nf_new >= -ego_row[P_BSAFE]
    incentive = a_new - a_old + ego_row[P_POLITE] * (new_fol_term + old_fol_term)
    return safe, incentive, a_new


@numba.njit(cache=True)
def old_follower_term(v, ego_len, lead_gap, lead_v, fol_gap, fol_v, fol_row, emergency):
    """Acceleration change of the current follower if the ego leaves the lane."""
    a_of_old = idm_clamped(fol_v, fol_v - v, fol_gap, fol_row, emergency)
    if math.isinf(lead_gap):
        a_of_new = idm_clamped(fol_v, 0.0, math.inf, fol_row, emergency)
    else:
        a_of_new = idm_clamped(fol_v, fol_v - lead_v,
                               fol_gap + ego_len + lead_gap, fol_row, emergency)
    return a_of_new - a_of_old


@numba.njit(cache=True)
def signed_offset(x, length):
    """Map a ring displacement onto ``[-length/2, length/2)``."""
    return (x + 0.5 * length) % length - 0.5 * length


@numba.njit(cache=True)
def is_ahead(offset, other_id, ego_id):
    return offset > 0.0 or (offset == 0.0 and other_id > ego_id)


# ---------------------------------------------------------------------------
# counter-based noise


@numba.njit(cache=True)
def _mix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@numba.njit(cache=True)
def gauss(seed, step, observer, target, purpose, component):
    """Standard normal draw addressed by its full key; no generator state.

    All arguments are reinterpreted as uint64. The draw is truncated at
    ``NOISE_CLIP`` standard deviations.
    """
    h = _mix(np.uint64(seed))
    h = _mix(h ^ np.uint64(step))
    h = _mix(h ^ np.uint64(observer))
    h = _mix(h ^ np.uint64(target))
    h = _mix(h ^ np.uint64(purpose * 2 + component))
    h2 = _mix(h)
    u1 = (np.float64(h >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
    u2 = np.float64(h2 >> np.uint64(11)) * 1.1102230246251565e-16
    z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
    if z > NOISE_CLIP:
        return NOISE_CLIP
    if z < -NOISE_CLIP:
        return -NOISE_CLIP
    return z


@numba.njit(cache=True)
def gauss_many(seed, step, observer, targets, purpose, component):
    out = np.empty(targets.shape[0])
    for k in range(targets.shape[0]):
        out[k] = gauss(seed, step, observer, targets[k], purpose, component)
    return out
