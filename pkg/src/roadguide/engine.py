"""Compiled whole-run simulator.

Implements exactly the update of :func:`roadguide.dynamics.step` on flat
arrays with numba. The reference stepper builds a full snapshot per vehicle;
here only the tracks a decision reads are located, by binary search over
lanes sorted by ``(position, id)`` in the stored world.

Partial roadside coverage (fallback sensing for uncovered vehicles) is only
supported by the reference stepper; :func:`simulate` delegates such
configurations to it.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from ._kernels import (
    NOISE_CLIP,
    P_LEN,
    PURPOSE_LOCAL,
    PURPOSE_ROADSIDE,
    ROADSIDE_OBSERVER,
    gauss,
    idm_clamped,
    idm_raw,
    is_ahead,
    lane_gain,
    old_follower_term,
    signed_offset,
)
from .dynamics import CONTACT_CLEARANCE_M, COOLDOWN_EPS, GAP_FLOOR_M
from .metrics import SimTrace
from .perception import ROADSIDE, deploy_roadside
from .scenario import ScenarioConfig, VehicleClass, World, build_scenario

EV_BRAKE = 0
EV_CONTACT = 1

_jit = numba.njit(cache=True)
_idm_raw = idm_raw
_idm_clamped = idm_clamped
_lane_gain = lane_gain
_old_follower_term = old_follower_term
_signed_offset = signed_offset
_is_ahead = is_ahead


@_jit
def _forward_offset(p, x, L, ahead):
    off = _signed_offset(p - x, L)
    if ahead and off < -0.25 * L:
        off += L
    elif (not ahead) and off > 0.25 * L:
        off -= L
    return off


@_jit
def _wrap(x, L):
    r = x % L
    if r >= L:
        return 0.0
    return r


@_jit
def _sort_lanes(direction, lane, pos, n_lanes):
    """Order ids by (direction, lane, position, id); return order and group bounds."""
    n = pos.shape[0]
    o1 = np.argsort(pos, kind="mergesort")
    grp = np.empty(n, dtype=np.int64)
    for k in range(n):
        i = o1[k]
        grp[k] = direction[i] * n_lanes + lane[i]
    o2 = np.argsort(grp, kind="mergesort")
    order = o1[o2]
    start = np.zeros(2 * n_lanes + 1, dtype=np.int64)
    for k in range(n):
        i = order[k]
        start[direction[i] * n_lanes + lane[i] + 1] += 1
    for g in range(2 * n_lanes):
        start[g + 1] += start[g]
    return order, start


@_jit
def _first_after(order, pos, s, e, pe, ego):
    lo = s
    hi = e
    while lo < hi:
        mid = (lo + hi) // 2
        j = order[mid]
        pj = pos[j]
        if pj > pe or (pj == pe and j > ego):
            hi = mid
        else:
            lo = mid + 1
    return lo


@_jit
def _neighbors(order, start, pos, g, pe, ego, L):
    """Sorted-index of the nearest leader and follower of ``ego`` in group ``g`` (-1 if none)."""
    s = start[g]
    e = start[g + 1]
    if e == s:
        return -1, -1
    k = _first_after(order, pos, s, e, pe, ego)
    kl = k if k < e else s
    if order[kl] == ego:
        kl = kl + 1 if kl + 1 < e else s
        if order[kl] == ego:
            kl = -1
    kf = k - 1 if k - 1 >= s else e - 1
    if order[kf] == ego:
        kf = kf - 1 if kf - 1 >= s else e - 1
        if order[kf] == ego:
            kf = -1
    if kl >= 0:
        j = order[kl]
        if not _is_ahead(_signed_offset(pos[j] - pe, L), j, ego):
            kl = -1
    if kf >= 0:
        j = order[kf]
        if _is_ahead(_signed_offset(pos[j] - pe, L), j, ego):
            kf = -1
    return kl, kf


@_jit
def _kept(j, pe, pos, L, roadside, rng, floor, conf_rsu):
    if roadside:
        return conf_rsu >= floor
    dist = abs(_signed_offset(pos[j] - pe, L))
    conf = 1.0 - dist / rng
    return dist <= rng and conf >= floor


@_jit
def _measure(j, pos, spd, L, sig_p, sig_v, seed, t, obs, purpose):
    p = pos[j]
    v = spd[j]
    if sig_p > 0:
        p = p + sig_p * gauss(seed, t, obs, np.uint64(j), purpose, 0)
    if sig_v > 0:
        v = v + sig_v * gauss(seed, t, obs, np.uint64(j), purpose, 1)
    return p % L, v


@_jit
def _advance(t, seed, L, n_lanes, cls, length, direction, lane, pos, speed, cooldown,
             hist_pos, hist_speed, hist_lane, params, pmode, prange, psig_p, psig_v,
             plat, pfloor, pconf, plook, dt, cooldown_s, em,
             out_lane, out_pos, out_speed, out_accel, out_cooldown,
             ev_kind, ev_fol, ev_lead):
    n = pos.shape[0]
    depth = hist_pos.shape[0]
    orders = np.empty((depth, n), dtype=np.int64)
    starts = np.empty((depth, 2 * n_lanes + 1), dtype=np.int64)
    for d in range(depth):
        o, s = _sort_lanes(direction, hist_lane[d], hist_pos[d], n_lanes)
        orders[d] = o
        starts[d] = s
    n_ev = 0
    for i in range(n):
        c = cls[i]
        prow = params[c]
        roadside = pmode[c] == 1
        d = plat[c] - 1
        hp = hist_pos[d]
        hs = hist_speed[d]
        order = orders[d]
        start = starts[d]
        # offsets are read within the stored picture, own position included
        x = hp[i]
        v = speed[i]
        li = lane[i]
        my_len = length[i]
        base = direction[i] * n_lanes
        rng = prange[c]
        fl = pfloor[c]
        cr = pconf[c]
        sp = psig_p[c]
        sv = psig_v[c]
        if roadside:
            obs = ROADSIDE_OBSERVER
            purpose = PURPOSE_ROADSIDE
        else:
            obs = np.uint64(i)
            purpose = PURPOSE_LOCAL

        # current lane
        kl, kf = _neighbors(order, start, hp, base + li, x, i, L)
        cur_lead = -1
        cur_gap = math.inf
        cur_lv = 0.0
        if kl >= 0 and _kept(order[kl], x, hp, L, roadside, rng, fl, cr):
            cur_lead = order[kl]
            pp, pv = _measure(cur_lead, hp, hs, L, sp, sv, seed, t, obs, purpose)
            cur_gap = _forward_offset(pp, x, L, True) - length[cur_lead]
            cur_lv = max(pv, 0.0)
        target = li
        t_lead = cur_lead
        t_gap = cur_gap
        t_lv = cur_lv
        t_kl = kl if cur_lead >= 0 else -1

        if cooldown[i] <= COOLDOWN_EPS and n_lanes > 1:
            lead_gap = max(cur_gap, GAP_FLOOR_M)
            if math.isinf(lead_gap):
                a_old = _idm_clamped(v, 0.0, lead_gap, prow, em)
            else:
                a_old = _idm_clamped(v, v - cur_lv, lead_gap, prow, em)
            of_term = 0.0
            if kf >= 0 and _kept(order[kf], x, hp, L, roadside, rng, fl, cr):
                jf = order[kf]
                fp, fv = _measure(jf, hp, hs, L, sp, sv, seed, t, obs, purpose)
                fgap = -_forward_offset(fp, x, L, False) - my_len
                of_term = _old_follower_term(v, my_len, lead_gap, cur_lv,
                                             max(fgap, GAP_FLOOR_M), max(fv, 0.0),
                                             params[cls[jf]], em)
            best = 0
            best_acc = -math.inf
            tie = False
            best_lead = -1
            best_gap = math.inf
            best_lv = 0.0
            best_kl = -1
            for side in range(2):
                tl = li + 1 if side == 0 else li - 1
                if tl < 0 or tl >= n_lanes:
                    continue
                nkl, nkf = _neighbors(order, start, hp, base + tl, x, i, L)
                n_lead = -1
                n_gap = math.inf
                n_lv = 0.0
                if nkl >= 0 and _kept(order[nkl], x, hp, L, roadside, rng, fl, cr):
                    n_lead = order[nkl]
                    pp, pv = _measure(n_lead, hp, hs, L, sp, sv, seed, t, obs, purpose)
                    n_gap = _forward_offset(pp, x, L, True) - length[n_lead]
                    n_lv = max(pv, 0.0)
                if n_gap <= 0:
                    continue
                has_fol = False
                n_fgap = 0.0
                n_fv = 0.0
                frow = prow
                if nkf >= 0 and _kept(order[nkf], x, hp, L, roadside, rng, fl, cr):
                    jf = order[nkf]
                    fp, fv = _measure(jf, hp, hs, L, sp, sv, seed, t, obs, purpose)
                    n_fgap = -_forward_offset(fp, x, L, False) - my_len
                    n_fv = max(fv, 0.0)
                    frow = params[cls[jf]]
                    has_fol = True
                    if n_fgap <= 0:
                        continue
                safe, incentive, a_new = _lane_gain(v, my_len, prow, a_old, n_gap, n_lv,
                                                    has_fol, n_fgap, n_fv, frow, of_term, em)
                if not (safe and incentive > prow[8]):
                    continue
                if a_new > best_acc:
                    best = side + 1
                    best_acc = a_new
                    tie = False
                    best_lead = n_lead
                    best_gap = n_gap
                    best_lv = n_lv
                    best_kl = nkl if n_lead >= 0 else -1
                elif a_new == best_acc:
                    tie = True
            if best > 0 and not tie:
                target = li + 1 if best == 1 else li - 1
                t_lead = best_lead
                t_gap = best_gap
                t_lv = best_lv
                t_kl = best_kl
        out_lane[i] = target

        # longitudinal control toward the (hazard-aware) leader of the chosen lane
        if t_lead >= 0:
            slowest = t_lv
            look = plook[c]
            if look > 0:
                g = base + target
                s0 = start[g]
                e0 = start[g + 1]
                k = t_kl
                for _ in range(e0 - s0):
                    j = order[k]
                    if j == i:
                        break
                    if not _is_ahead(_signed_offset(hp[j] - x, L), j, i):
                        break
                    if not _kept(j, x, hp, L, roadside, rng, fl, cr):
                        break
                    if _forward_offset(hp[j], x, L, True) - NOISE_CLIP * sp > look:
                        break
                    pp, pv = _measure(j, hp, hs, L, sp, sv, seed, t, obs, purpose)
                    off = _forward_offset(pp, x, L, True)
                    if off > 0.0 and off <= look:
                        slowest = min(slowest, max(pv, 0.0))
                    k = k + 1 if k + 1 < e0 else s0
            raw = _idm_raw(v, v - slowest, max(t_gap, GAP_FLOOR_M), prow)
        else:
            raw = _idm_raw(v, 0.0, math.inf, prow)
        if raw < -em:
            ev_kind[n_ev] = EV_BRAKE
            ev_fol[n_ev] = i
            ev_lead[n_ev] = t_lead
            n_ev += 1
            raw = -em
        out_accel[i] = raw

    # integration
    disp = np.empty(n)
    for i in range(n):
        a = out_accel[i]
        v = speed[i]
        v_new = v + a * dt
        if v_new < 0:
            disp[i] = -v * v / (2.0 * a)
            out_speed[i] = 0.0
        else:
            disp[i] = v * dt + 0.5 * a * dt * dt
            out_speed[i] = v_new

    # overlap resolution, ordered by pre-move positions in the new lanes
    order, start = _sort_lanes(direction, out_lane, pos, n_lanes)
    changed = True
    while changed:
        changed = False
        for g in range(2 * n_lanes):
            s0 = start[g]
            e0 = start[g + 1]
            if e0 - s0 < 2:
                continue
            for k in range(s0, e0):
                f = order[k]
                if k + 1 < e0:
                    ld = order[k + 1]
                    delta = pos[ld] - pos[f]
                else:
                    ld = order[s0]
                    delta = pos[ld] - pos[f] + L
                gap = delta + disp[ld] - disp[f] - length[ld]
                if gap < 0:
                    disp[f] = delta + disp[ld] - length[ld] - CONTACT_CLEARANCE_M
                    out_speed[f] = 0.0
                    ev_kind[n_ev] = EV_CONTACT
                    ev_fol[n_ev] = f
                    ev_lead[n_ev] = ld
                    n_ev += 1
                    changed = True

    for i in range(n):
        out_pos[i] = _wrap(pos[i] + disp[i], L)
        if out_lane[i] != lane[i]:
            out_cooldown[i] = cooldown_s
        else:
            out_cooldown[i] = max(cooldown[i] - dt, 0.0)
    return n_ev


def _class_tables(config: ScenarioConfig):
    k = len(VehicleClass)
    params = np.stack([config.params_by_class[c].as_row() for c in VehicleClass])
    mode = np.zeros(k, dtype=np.int64)
    rng = np.zeros(k)
    sig_p = np.zeros(k)
    sig_v = np.zeros(k)
    lat = np.zeros(k, dtype=np.int64)
    floor = np.zeros(k)
    conf = np.zeros(k)
    look = np.zeros(k)
    for c in VehicleClass:
        s = config.perception_by_class[c]
        mode[c] = 1 if s.mode == ROADSIDE else 0
        rng[c] = s.range_m if math.isfinite(s.range_m) else 0.0
        sig_p[c] = s.pos_noise_sigma_m
        sig_v[c] = s.speed_noise_sigma_mps
        lat[c] = s.latency_steps
        floor[c] = s.confidence_floor
        conf[c] = s.roadside_confidence
        look[c] = s.lookahead_m
    return params, mode, rng, sig_p, sig_v, lat, floor, conf, look


def needs_reference(config: ScenarioConfig) -> bool:
    """True when the configuration uses features only the reference stepper has."""
    plan = deploy_roadside(config.geometry, config.rsu_spacing_m, config.rsu_sensing_radius_m)
    uses_rsu = any(s.mode == ROADSIDE for s in config.perception_by_class.values())
    return uses_rsu and plan.coverage_fraction < 1.0


def simulate(config: ScenarioConfig, steps: int | None = None) -> SimTrace:
    """Run one full simulation and return its trace.

    ``steps`` overrides ``config.steps`` (mainly for tests).
    """
    if needs_reference(config):
        from .dynamics import simulate_reference
        return simulate_reference(config, steps)
    steps = config.steps if steps is None else steps
    world = build_scenario(config)
    n = len(world)
    L = float(config.geometry.length_m)
    n_lanes = config.geometry.lanes_per_direction
    depth = config.max_latency
    tables = _class_tables(config)

    cls = world.vehicle_class.astype(np.int64)
    length = world.length.astype(np.float64)
    direction = world.direction.astype(np.int64)
    lane = world.lane.astype(np.int64)
    pos = world.position.copy()
    speed = world.speed.copy()
    cooldown = world.cooldown.copy()
    hist_pos = np.tile(pos, (depth, 1))
    hist_speed = np.tile(speed, (depth, 1))
    hist_lane = np.tile(lane, (depth, 1))

    tr_pos = np.empty((steps, n))
    tr_speed = np.empty((steps, n))
    tr_accel = np.empty((steps, n))
    tr_lane = np.empty((steps, n), dtype=np.int8)
    ev_kind = np.empty(4 * n, dtype=np.int64)
    ev_fol = np.empty(4 * n, dtype=np.int64)
    ev_lead = np.empty(4 * n, dtype=np.int64)
    events = []
    seed = np.uint64(config.seed)
    for t in range(steps):
        out_lane = np.empty(n, dtype=np.int64)
        out_pos = np.empty(n)
        out_speed = np.empty(n)
        out_accel = np.empty(n)
        out_cd = np.empty(n)
        cap = n * (n + 1) + n
        if ev_kind.shape[0] < cap:
            ev_kind = np.empty(cap, dtype=np.int64)
            ev_fol = np.empty(cap, dtype=np.int64)
            ev_lead = np.empty(cap, dtype=np.int64)
        k = _advance(np.uint64(t), seed, L, n_lanes, cls, length, direction, lane, pos, speed,
                     cooldown, hist_pos, hist_speed, hist_lane, tables[0], *tables[1:],
                     config.dt, config.lane_change_cooldown_s, config.emergency_decel_mps2,
                     out_lane, out_pos, out_speed, out_accel, out_cd, ev_kind, ev_fol, ev_lead)
        if k:
            events.append(np.column_stack([np.full(k, t + 1), ev_fol[:k], ev_lead[:k],
                                           ev_kind[:k]]))
        lane, pos, speed, cooldown = out_lane, out_pos, out_speed, out_cd
        if depth > 1:
            hist_pos[1:] = hist_pos[:-1]
            hist_speed[1:] = hist_speed[:-1]
            hist_lane[1:] = hist_lane[:-1]
        hist_pos[0] = pos
        hist_speed[0] = speed
        hist_lane[0] = lane
        tr_pos[t] = pos
        tr_speed[t] = speed
        tr_accel[t] = out_accel
        tr_lane[t] = lane
    ev = np.concatenate(events) if events else np.empty((0, 4), dtype=np.int64)
    return SimTrace(config=config, initial=world, position=tr_pos, speed=tr_speed,
                    accel=tr_accel, lane=tr_lane, events=ev.astype(np.int64))
