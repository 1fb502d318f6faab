"""Hot numerical kernels for the continuum solver.

These are compiled with numba when available; the same functions run as
plain Python otherwise (identical arithmetic, just slower).  Everything here
works on bare float64 arrays so the kernels stay trivially jit-able.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly by import
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


@njit(cache=True)
def donnan_root(z, A, chi, u_max, rtol_res):
    """Solve sum_j z_j A_j exp(-z_j u) + chi = 0 for the reduced potential u.

    The residual is strictly decreasing in u whenever any charged species has
    A_j > 0, so the root is unique.  Safeguarded Newton on the bracket
    [-u_max, u_max] with bisection fallback.

    Returns (u, residual, ok).  ok = False means no sign change on the
    bracket (infeasible partitioning).
    """
    n = z.shape[0]
    s2 = 0.0
    for j in range(n):
        s2 += z[j] * z[j] * A[j]
    if s2 == 0.0:
        # No charged species with mass: feasible only for a neutral closure.
        if chi == 0.0:
            return 0.0, 0.0, True
        return 0.0, chi, False

    lo = -u_max
    hi = u_max
    r_lo = chi
    r_hi = chi
    for j in range(n):
        r_lo += z[j] * A[j] * np.exp(-z[j] * lo)
        r_hi += z[j] * A[j] * np.exp(-z[j] * hi)
    if r_lo < 0.0 or r_hi > 0.0:
        return 0.0, r_lo if abs(r_lo) < abs(r_hi) else r_hi, False

    u = 0.0
    r = 0.0
    for _ in range(300):
        r = chi
        scale = abs(chi)
        drdu = 0.0
        for j in range(n):
            e = A[j] * np.exp(-z[j] * u)
            r += z[j] * e
            scale_j = abs(z[j]) * e
            scale += scale_j
            drdu -= z[j] * z[j] * e
        if abs(r) <= rtol_res * max(scale, 1e-300):
            return u, r, True
        if r > 0.0:
            lo = u
        else:
            hi = u
        if drdu != 0.0:
            u_new = u - r / drdu
        else:
            u_new = 0.5 * (lo + hi)
        if not (lo < u_new < hi):
            u_new = 0.5 * (lo + hi)
        if abs(u_new - u) <= 1e-16 * max(1.0, abs(u)):
            u = u_new
            break
        u = u_new
    return u, r, abs(r) <= rtol_res * max(abs(chi) + s2, 1e-300)


@njit(cache=True)
def march_domain(c0, cp, z, kc, kdd, jv, length, n_cells):
    """First-order upwinded march of the steady extended Nernst-Planck system.

    Solves dC_j/dx = (kc_j C_j - cp_j) jv / kdd_j - z_j C_j dphi/dx on a
    uniform grid, with the dimensionless potential gradient dphi/dx obtained
    from the electroneutrality closure sum_j z_j dC_j/dx = 0 at every cell
    (this conserves the net charge of the profile to roundoff).

    kdd is the effective diffusivity (K_d * D for the pore, D for the film);
    kc is the convective factor (K_c in the pore, 1 in the film).

    Returns (profile[(n+1), d], phi[(n+1)] dimensionless potential relative
    to the domain inlet, bad).  bad is -1 on success, otherwise the index
    of the first ion whose concentration went negative or non-finite; the
    caller uses it to back off that component alone.
    """
    d = c0.shape[0]
    profile = np.zeros((n_cells + 1, d))
    phi = np.zeros(n_cells + 1)
    c = c0.copy()
    for j in range(d):
        profile[0, j] = c[j]
    h = length / n_cells
    bad = -1
    for k in range(n_cells):
        denom = 0.0
        num = 0.0
        for j in range(d):
            adv = (kc[j] * c[j] - cp[j]) * jv / kdd[j]
            num += z[j] * adv
            denom += z[j] * z[j] * c[j]
        g = num / denom if denom > 1e-300 else 0.0
        for j in range(d):
            adv = (kc[j] * c[j] - cp[j]) * jv / kdd[j]
            c[j] = c[j] + h * (adv - z[j] * c[j] * g)
            if bad < 0 and (not np.isfinite(c[j]) or c[j] < 0.0):
                bad = j
            profile[k + 1, j] = c[j]
        phi[k + 1] = phi[k] + h * g
        if bad >= 0:
            break
    return profile, phi, bad


@njit(cache=True)
def chain_march(
    feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, chi,
    jv, delta_f, dx, n_cells, u_max, rtol_res,
):
    """March film -> entrance partition -> pore for one permeate estimate.

    delta_f = 0 degenerates the film to the identity (wall = feed), which
    turns this into a pure pore solve against a fixed wall composition.

    Returns (wall, u0, c_in, profile, phi, exit_conc, status, bad) with
    status 0 = ok, 1 = march breakdown, 2 = infeasible entrance partition;
    bad is the offending ion index for status 1, else -1.
    """
    d = z.shape[0]
    wall = feed_c.copy()
    if delta_f > 0.0:
        film, _, badf = march_domain(feed_c, cp, z, kc_f, kdd_f, jv, delta_f, n_cells)
        if badf >= 0:
            return wall, 0.0, wall, film, np.zeros(n_cells + 1), wall, 1, badf
        for j in range(d):
            wall[j] = film[n_cells, j]
    amp = np.zeros(d)
    for j in range(d):
        amp[j] = wall[j] * a_tot[j]
    u0, _, ok0 = donnan_root(z, amp, chi, u_max, rtol_res)
    if not ok0:
        return (
            wall, 0.0, amp, np.zeros((n_cells + 1, d)), np.zeros(n_cells + 1),
            amp, 2, -1,
        )
    c_in = np.zeros(d)
    for j in range(d):
        c_in[j] = amp[j] * np.exp(-z[j] * u0)
    profile, phi, badp = march_domain(c_in, cp, z, kc_p, kdd_p, jv, dx, n_cells)
    exit_c = np.zeros(d)
    for j in range(d):
        exit_c[j] = profile[n_cells, j]
    if badp >= 0:
        return wall, u0, c_in, profile, phi, exit_c, 1, badp
    return wall, u0, c_in, profile, phi, exit_c, 0, -1



@njit(cache=True)
def _psi_track(psi, phi, eta_psi):
    """Relax the paced potential profile toward the raw one.

    Returns the max deviation between the two, relative to the raw profile's
    magnitude, measured before the relaxation step.
    """
    n = psi.shape[0]
    mx = 0.0
    scale = 1e-3
    for k in range(n):
        diff = abs(phi[k] - psi[k])
        if diff > mx:
            mx = diff
        a = abs(phi[k])
        if a > scale:
            scale = a
    for k in range(n):
        psi[k] += eta_psi * (phi[k] - psi[k])
    return mx / scale


@njit(cache=True)
def _exit_candidate(z, exit_c, a_tot, active, u_max, rtol_res):
    """Partition a pore-exit composition into a neutral permeate candidate.

    Returns (cand, ok); ok = False when the exit side has no neutral
    partitioning (no sign change of the charge residual).
    """
    d = z.shape[0]
    b = np.zeros(d)
    for j in range(d):
        if active[j]:
            b[j] = exit_c[j] / a_tot[j]
    w, _, ok = donnan_root(z, b, 0.0, u_max, rtol_res)
    cand = np.zeros(d)
    if ok:
        for j in range(d):
            if active[j]:
                cand[j] = b[j] * np.exp(-z[j] * w)
    return cand, ok


@njit(cache=True)
def _solve_linear(A, rhs):
    """Solve the small dense system A x = rhs by partial-pivot elimination.

    Returns (x, ok); ok = False on a vanishing pivot or non-finite result.
    Avoids raising from inside compiled code.
    """
    n = A.shape[0]
    M = np.zeros((n, n + 1))
    for r in range(n):
        for c in range(n):
            M[r, c] = A[r, c]
        M[r, n] = rhs[r]
    for col in range(n):
        piv = col
        big = abs(M[col, col])
        for r in range(col + 1, n):
            v = abs(M[r, col])
            if v > big:
                big = v
                piv = r
        if big < 1e-300:
            return np.zeros(n), False
        if piv != col:
            for c in range(n + 1):
                t = M[col, c]
                M[col, c] = M[piv, c]
                M[piv, c] = t
        inv = 1.0 / M[col, col]
        for r in range(col + 1, n):
            f = M[r, col] * inv
            if f != 0.0:
                for c in range(col, n + 1):
                    M[r, c] -= f * M[col, c]
    x = np.zeros(n)
    for r in range(n - 1, -1, -1):
        acc = M[r, n]
        for c in range(r + 1, n):
            acc -= M[r, c] * x[c]
        x[r] = acc / M[r, r]
    for r in range(n):
        if not np.isfinite(x[r]):
            return x, False
    return x, True


@njit(cache=True)
def _damped_sweeps(
    feed_c, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
    jv, delta_f, dx, n_cells, eta_psi, tol_rel, u_max, rtol_res,
    cp, prev_step, have_step, eta_eff, rel_prev, psi, have_psi,
    exit_c, phi, n_sweeps, evals, max_evals,
):
    """Run up to n_sweeps damped fixed-point sweeps; see transport_fixed_point.

    Mutates cp, prev_step and psi in place.  An infeasible trial is repaired
    by pulling the offending component alone back toward its last feasible
    value (a uniform pull is the last resort), so one wall-hugging ion never
    erases the others' progress.

    Status 0 converged, 1 march breakdown, 2 infeasible entrance,
    3 evaluation budget exhausted, 4 infeasible exit, 5 sweeps used up
    without converging.
    """
    d = z.shape[0]
    rel = 1e300
    psi_rel = 1e300
    status = 5
    for _ in range(n_sweeps):
        cand, ok = _exit_candidate(z, exit_c, a_tot, active, u_max, rtol_res)
        if not ok:
            status = 4
            break
        rel = 0.0
        dot = 0.0
        for j in range(d):
            if active[j]:
                step = cand[j] - cp[j]
                dot += step * prev_step[j]
                prev_step[j] = step
                r = abs(step) / max(cp[j], 1e-300)
                if r > rel:
                    rel = r
        if not have_psi:
            psi[:] = phi
            have_psi = True
            psi_rel = 1e300
        else:
            psi_rel = _psi_track(psi, phi, eta_psi)
        if rel <= tol_rel and psi_rel <= tol_rel:
            for j in range(d):
                cp[j] = cand[j]
            status = 0
            break
        if have_step and dot < 0.0 and rel > 0.9999 * rel_prev:
            eta_eff = max(0.6 * eta_eff, 1e-3)
        have_step = True
        rel_prev = rel
        cp_next = np.zeros(d)
        for j in range(d):
            if active[j]:
                dc = cand[j] - cp[j]
                if dc != 0.0:
                    f = min(1.0, abs(cp[j] / dc))
                    cp_next[j] = cp[j] * (1.0 + eta_eff * f * (dc / cp[j]))
                else:
                    cp_next[j] = cp[j]
        st = 1
        for attempt in range(120):
            if evals >= max_evals:
                status = 3
                break
            wall, u0, c_in, profile, phi2, exit2, st, bad = chain_march(
                feed_c, cp_next, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, chi,
                jv, delta_f, dx, n_cells, u_max, rtol_res,
            )
            evals += 1
            if st == 0:
                for k in range(n_cells + 1):
                    phi[k] = phi2[k]
                for j in range(d):
                    exit_c[j] = exit2[j]
                break
            if st == 2:
                break
            if attempt < 60 and bad >= 0:
                cp_next[bad] = 0.5 * (cp_next[bad] + cp[bad])
            else:
                for j in range(d):
                    cp_next[j] = 0.5 * (cp_next[j] + cp[j])
        if status == 3:
            break
        if st == 2:
            status = 2
            break
        if st != 0:
            status = 1
            break
        for j in range(d):
            cp[j] = cp_next[j]
        if evals >= max_evals:
            status = 3
            break
    return have_step, eta_eff, rel, rel_prev, have_psi, psi_rel, evals, status


@njit(cache=True)
def _eval_h(
    feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
    jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
):
    """Chain march plus exit partition; h = ln(candidate / cp) per active ion.

    One call is one chain evaluation.  Returns (h, phi, ok, bad); bad >= 0
    blames a march ion, -1 an infeasible entrance, -2 an infeasible or
    collapsed exit partition.
    """
    d = z.shape[0]
    da = idx.shape[0]
    h = np.zeros(d)
    wall, u0, c_in, profile, phi, exit_c, st, bad = chain_march(
        feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, chi,
        jv, delta_f, dx, n_cells, u_max, rtol_res,
    )
    if st != 0:
        return h, phi, False, bad
    cand, okc = _exit_candidate(z, exit_c, a_tot, active, u_max, rtol_res)
    if not okc:
        return h, phi, False, -2
    for a in range(da):
        j = idx[a]
        if cand[j] <= 0.0:
            return h, phi, False, -2
        h[j] = np.log(cand[j] / cp[j])
    return h, phi, True, -1


@njit(cache=True)
def _project_en_k(cp, z, idx, in_S, h, have_h, u_max):
    """Rescale well-behaved ions onto the electroneutral manifold.

    Slaved ions and ions whose candidate has collapsed (h far negative)
    keep their coordinates; their charge enters as fixed background.
    """
    da = idx.shape[0]
    live = np.zeros(da, dtype=np.int64)
    nl = 0
    for a in range(da):
        j = idx[a]
        if in_S[j] == 0 and ((not have_h) or h[j] > -2.0):
            live[nl] = j
            nl += 1
    if nl == 0:
        return cp
    allpos = True
    allneg = True
    for b in range(nl):
        zj = z[live[b]]
        if zj < 0.0:
            allpos = False
        if zj > 0.0:
            allneg = False
    if allpos or allneg:
        return cp
    chi_bg = 0.0
    for a in range(da):
        j = idx[a]
        inlive = False
        for b in range(nl):
            if live[b] == j:
                inlive = True
                break
        if not inlive:
            chi_bg += z[j] * cp[j]
    zl = np.zeros(nl)
    Al = np.zeros(nl)
    for b in range(nl):
        zl[b] = z[live[b]]
        Al[b] = cp[live[b]]
    u, res, ok = donnan_root(zl, Al, chi_bg, 5.0, 1e-12)
    if not ok:
        return cp
    outv = cp.copy()
    for b in range(nl):
        j = live[b]
        outv[j] = cp[j] * np.exp(-z[j] * u)
    return outv


@njit(cache=True)
def _scalar_root_k(
    feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
    jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
    g, t0, f_tol, width_tol,
):
    """Root of h along a log-space ray: bracket expansion + Illinois.

    g holds the ion (or group of ions) scaled jointly by e^t; the residual
    is h at the leading entry (for a charged pair scaled jointly the two
    residuals coincide on the electroneutral manifold, so the group ray
    solves the whole system).

    Stops on the residual, not the bracket width: wall-hugging ions can
    have d h_j / d ln cp_j of 1e8 or more, so any fixed width leaves a
    useless parked residual.  Near a feasibility cliff the root may not be
    representable: the bracket collapses to adjacent floats with the
    residual still above f_tol.  That is convergence in the unknown itself
    (the root lies within one ulp of the returned value), reported via
    at_floor so callers can accept the point instead of grinding.
    width_tol > 0 allows loose rooting for probe evaluations.

    Returns (vals, best_f, at_floor, ok, evals_used); own-coordinate
    halving only cures infeasibility this ray causes, so ok = False when
    the blame repeatedly lies elsewhere.
    """
    glen = g.shape[0]
    lead = g[0]
    vals = np.zeros(glen)
    evals = 0
    base = cp.copy()
    h0, phi0, okh, bad = _eval_h(
        feed_c, base, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
        jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
    )
    evals += 1
    if not okh:
        w = base.copy()
        misses = 0
        fixed = False
        for _ in range(120):
            for b in range(glen):
                w[g[b]] *= 0.5
            h0, phi0, okh, bad = _eval_h(
                feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
                jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
            )
            evals += 1
            if okh:
                fixed = True
                break
            blame_ours = bad < 0
            for b in range(glen):
                if g[b] == bad:
                    blame_ours = True
            if not blame_ours:
                misses += 1
                if misses >= 4:
                    return vals, 0.0, False, False, evals
            else:
                misses = 0
        if not fixed:
            return vals, 0.0, False, False, evals
        base = w
    f0 = h0[lead]
    if abs(f0) <= f_tol:
        for b in range(glen):
            vals[b] = base[g[b]]
        return vals, f0, False, True, evals
    have_hi_f = False
    f_hi = 0.0
    if f0 > 0.0:
        t_lo = 0.0
        f_lo = f0
        t = t0
        t_hi = 0.0
        found = False
        for _ in range(80):
            w = base.copy()
            for b in range(glen):
                w[g[b]] = base[g[b]] * np.exp(t)
            h_t, phit, okt, badt = _eval_h(
                feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
                jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
            )
            evals += 1
            if (not okt) or h_t[lead] <= 0.0:
                t_hi = t
                if okt:
                    f_hi = h_t[lead]
                    have_hi_f = True
                found = True
                break
            t_lo = t
            f_lo = h_t[lead]
            t *= 4.0
            if t > 60.0:
                return vals, 0.0, False, False, evals
        if not found:
            return vals, 0.0, False, False, evals
    else:
        t_hi = 0.0
        f_hi = f0
        have_hi_f = True
        t = -t0
        t_lo = 0.0
        f_lo = 0.0
        found = False
        for _ in range(80):
            w = base.copy()
            for b in range(glen):
                w[g[b]] = base[g[b]] * np.exp(t)
            h_t, phit, okt, badt = _eval_h(
                feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
                jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
            )
            evals += 1
            if okt and h_t[lead] > 0.0:
                t_lo = t
                f_lo = h_t[lead]
                found = True
                break
            t *= 4.0
            if t < -60.0:
                return vals, 0.0, False, False, evals
        if not found:
            return vals, 0.0, False, False, evals
    best_t = t_lo
    best_f = f_lo
    last = 0
    at_floor = False
    for _ in range(160):
        width = t_hi - t_lo
        if abs(best_f) <= f_tol:
            break
        if width_tol > 0.0 and width <= width_tol:
            break
        # machine floor: the two endpoints are adjacent floats, so the
        # root itself sits between them; certified converged in x
        if not (base[lead] * np.exp(t_lo) < base[lead] * np.exp(t_hi)):
            at_floor = True
            break
        if have_hi_f and np.isfinite(f_hi) and f_hi < 0.0:
            tm = (t_lo * f_hi - t_hi * f_lo) / (f_hi - f_lo)
            pad = 0.01 * width
            if not (t_lo + pad <= tm <= t_hi - pad):
                tm = 0.5 * (t_lo + t_hi)
        else:
            tm = 0.5 * (t_lo + t_hi)
        if tm <= t_lo or tm >= t_hi:
            tm = 0.5 * (t_lo + t_hi)
            if tm <= t_lo or tm >= t_hi:
                at_floor = True
                break
        w = base.copy()
        for b in range(glen):
            w[g[b]] = base[g[b]] * np.exp(tm)
        h_t, phit, okt, badt = _eval_h(
            feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
        )
        evals += 1
        if okt and abs(h_t[lead]) < abs(best_f):
            best_t = tm
            best_f = h_t[lead]
        if (not okt) or h_t[lead] <= 0.0:
            t_hi = tm
            if okt:
                f_hi = h_t[lead]
                have_hi_f = True
            else:
                have_hi_f = False
            if last == 1 and f_lo > 0.0:
                f_lo *= 0.5
            last = 1
        else:
            t_lo = tm
            f_lo = h_t[lead]
            if last == -1 and have_hi_f and np.isfinite(f_hi):
                f_hi *= 0.5
            last = -1
    for b in range(glen):
        vals[b] = base[g[b]] * np.exp(best_t)
    return vals, best_f, at_floor, True, evals


@njit(cache=True)
def _slave_refresh_k(
    feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
    jv, delta_f, dx, n_cells, u_max, rtol_res, idx, in_S,
):
    """Re-root wall-hugging ions worst-first; failed roots are flagged for
    demotion.  Returns (cp_out, dem, flr, evals_used)."""
    d = z.shape[0]
    out = cp.copy()
    dem = np.zeros(d, dtype=np.uint8)
    flr = np.zeros(d, dtype=np.uint8)
    evals = 0
    for _ in range(2):
        live = np.zeros(d, dtype=np.int64)
        nl = 0
        for j in range(d):
            if in_S[j] == 1 and dem[j] == 0:
                live[nl] = j
                nl += 1
        if nl == 0:
            break
        hh, phih, okh, badh = _eval_h(
            feed_c, out, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
        )
        evals += 1
        if okh:
            settled = True
            for b in range(nl):
                j = live[b]
                if abs(hh[j]) > 1e-7 and flr[j] == 0:
                    settled = False
                    break
            if settled:
                break
        # worst-first order; unevaluable bases keep the index order
        keys = np.zeros(nl)
        for b in range(nl):
            keys[b] = -abs(hh[live[b]]) if okh else 0.0
        order = np.argsort(keys, kind="mergesort")
        for oo in range(nl):
            j = live[order[oo]]
            if okh and abs(hh[j]) <= 1e-7:
                flr[j] = 0
                continue
            gj = np.zeros(1, dtype=np.int64)
            gj[0] = j
            vals, bf, at_floor, okr, ev = _scalar_root_k(
                feed_c, out, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
                jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
                gj, 0.05, 1e-7, 0.0,
            )
            evals += ev
            if not okr:
                dem[j] = 1
            else:
                out[j] = vals[0]
                flr[j] = 1 if at_floor else 0
    return out, dem, flr, evals


@njit(cache=True)
def _slaved_eval_k(
    feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
    jv, delta_f, dx, n_cells, u_max, rtol_res, idx, in_S, n_S, allow_demote,
):
    """Refresh slaved roots then evaluate.  A root failure at a trial point
    rejects the trial (ok False, bad -3); only base points may demote.

    Returns (h, phi, cp_out, ok, bad, dem, flr, evals_used).
    """
    d = z.shape[0]
    dem = np.zeros(d, dtype=np.uint8)
    flr = np.zeros(d, dtype=np.uint8)
    evals = 0
    w = cp
    if n_S > 0:
        out, dem, flr, ev = _slave_refresh_k(
            feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx, in_S,
        )
        evals += ev
        any_dem = False
        for j in range(d):
            if dem[j] == 1:
                any_dem = True
        if any_dem and not allow_demote:
            h0 = np.zeros(d)
            phi0 = np.zeros(1)
            return h0, phi0, cp, False, -3, dem, flr, evals
        w = out
    h, phi, okh, bad = _eval_h(
        feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
        jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
    )
    evals += 1
    return h, phi, w, okh, bad, dem, flr, evals


@njit(cache=True)
def transport_fixed_point(
    feed_c,
    z,
    kc_f,
    kdd_f,
    kc_p,
    kdd_p,
    a_tot,
    active,
    chi,
    cp0,
    jv,
    delta_f,
    dx,
    n_cells,
    eta_psi,
    eta_c,
    tol_rel,
    max_iters,
    u_max,
    rtol_res,
):
    """Solve the film + pore transport chain for the permeate composition.

    The map being solved is G(cp): march the film and pore with permeate
    estimate cp, then re-partition the pore exit into a charge-neutral
    candidate.  A fixed point G(cp) = cp is the transport solution; the
    residual is h = ln(G(cp) / cp) over the active ions.

    A charged two-ion system is solved directly: joint scaling cp -> cp e^t
    stays on the electroneutral manifold, where both residuals coincide, so
    the whole system is a scalar root along one ray.

    Otherwise stage one is the damped sweep: the permeate is relaxed toward
    the candidate with a bounded multiplicative update (gain eta_c) and a
    paced copy of the potential profile is relaxed linearly (gain eta_psi).
    Convergence requires the unrelaxed candidate and the paced potential to
    both settle within tol_rel.  Two safeguards keep the sweeps stable:

    * feasibility: an estimate whose march goes negative is halved back
      toward the last feasible one (the zero-permeate chain is
      multiplicative inside the pore, so the origin is always feasible);
    * gain control: when the update direction reverses while the candidate
      residual fails to shrink, the effective gain is reduced (never raised
      back within one solve).

    Strongly excluded ions make both the sweep map and the Newton map
    arbitrarily stiff (the candidate for a trace co-ion is a near
    cancellation at the pore exit, with d h_j / d ln cp_j reaching 1e8), so
    if the sweeps have not converged after an opening block the solver
    switches to a partitioned iteration: ions that keep breaking trial
    steps are demoted to slaves, re-rooted along their own log axis inside
    every evaluation, while the remaining ions take damped Newton steps on
    the reduced system with a finite-difference Jacobian, falling back to a
    single relaxed sweep with feasibility backtracking whenever the Newton
    step is rejected.  Slaves whose root bracket collapses to adjacent
    floats are converged in the unknown itself (the residual is not
    representable there); they are excluded from the convergence gate and
    the returned rel reports the full residual honestly.

    max_iters caps the total number of chain evaluations (marches) plus
    potential-pacing updates; the returned iteration count uses the same
    metric.

    Status codes: 0 converged, 1 march breakdown, 2 infeasible entrance
    partition, 3 budget exhausted or stalled, 4 infeasible exit partition.
    """
    d = z.shape[0]
    cp = cp0.copy()
    prev_step = np.zeros(d)
    psi = np.zeros(n_cells + 1)
    have_psi = False
    have_step = False
    eta_eff = eta_c
    rel = 1e300
    rel_prev = 1e300
    psi_rel = 1e300
    evals = 0

    da = 0
    for j in range(d):
        if active[j]:
            da += 1
    idx = np.zeros(da, dtype=np.int64)
    k = 0
    for j in range(d):
        if active[j]:
            idx[k] = j
            k += 1

    in_S = np.zeros(d, dtype=np.uint8)
    n_S = 0
    h_seed = np.zeros(d)
    cp = _project_en_k(cp, z, idx, in_S, h_seed, False, u_max)

    if da == 2 and z[idx[0]] != 0.0 and z[idx[1]] != 0.0:
        # joint scaling of a charged pair stays on the electroneutral
        # manifold, where both residuals coincide: the system is one ray
        vals, bf, at_floor, okr, ev = _scalar_root_k(
            feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
            idx, 0.05, 1e-7, 0.0,
        )
        evals += ev
        if not okr:
            return cp, evals, rel, psi_rel, 1
        cp[idx[0]] = vals[0]
        cp[idx[1]] = vals[1]
        h2p, phi2p, ok2p, bad2p = _eval_h(
            feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
        )
        evals += 1
        if not ok2p:
            return cp, evals, rel, psi_rel, 1
        rel = 0.0
        for a in range(da):
            r = abs(np.exp(h2p[idx[a]]) - 1.0)
            if r > rel:
                rel = r
        if rel <= tol_rel or at_floor:
            psi[:] = phi2p
            psi_rel = 0.0
            return cp, evals, rel, psi_rel, 0
        return cp, evals, rel, psi_rel, 3

    wall, u0, c_in, profile, phi, exit_c, status, bad = chain_march(
        feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, chi,
        jv, delta_f, dx, n_cells, u_max, rtol_res,
    )
    evals += 1
    for attempt in range(400):
        if status != 1:
            break
        if attempt < 300 and bad >= 0:
            cp[bad] *= 0.5
        else:
            for j in range(d):
                cp[j] *= 0.5
        wall, u0, c_in, profile, phi, exit_c, status, bad = chain_march(
            feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res,
        )
        evals += 1
    if status != 0:
        return cp, evals, rel, psi_rel, 1 if status == 1 else 2

    phi_cur = phi.copy()
    exit_cur = exit_c.copy()
    have_step, eta_eff, rel, rel_prev, have_psi, psi_rel, evals, st = _damped_sweeps(
        feed_c, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
        jv, delta_f, dx, n_cells, eta_psi, tol_rel, u_max, rtol_res,
        cp, prev_step, have_step, eta_eff, rel_prev, psi, have_psi,
        exit_cur, phi_cur, 200, evals, max_iters,
    )
    if st != 5:
        return cp, evals, rel, psi_rel, st

    cooldown = np.zeros(d, dtype=np.int64)
    fails = np.zeros(d, dtype=np.int64)
    cp_ok = np.zeros(d)
    have_cp_ok = False
    eta2 = eta_c
    prev2 = np.zeros(d)
    have_prev2 = False
    relb_prev = 1e300
    rounds = 0
    hn_best = 1e300
    stall = 0
    dlt = 1e-6

    while evals < max_iters:
        rounds += 1
        h, phi_b, cp2, okb, badb, dem, flr, ev = _slaved_eval_k(
            feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active, chi,
            jv, delta_f, dx, n_cells, u_max, rtol_res, idx, in_S, n_S, True,
        )
        evals += ev
        for j in range(d):
            if dem[j] == 1:
                if in_S[j] == 1:
                    in_S[j] = 0
                    n_S -= 1
                cooldown[j] = rounds + 5
        if not okb:
            if (
                badb >= 0
                and in_S[badb] == 0
                and n_S < da - 1
                and cooldown[badb] <= rounds
            ):
                in_S[badb] = 1
                n_S += 1
                continue
            repaired = False
            if have_cp_ok:
                for _ in range(20):
                    for j in range(d):
                        cp[j] = 0.5 * (cp[j] + cp_ok[j])
                    hr, phir, okr2, badr = _eval_h(
                        feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot,
                        active, chi, jv, delta_f, dx, n_cells, u_max,
                        rtol_res, idx,
                    )
                    evals += 1
                    if okr2:
                        repaired = True
                        break
            if repaired:
                continue
            if badb == -1:
                return cp, evals, rel, psi_rel, 2
            if badb == -2:
                return cp, evals, rel, psi_rel, 4
            return cp, evals, rel, psi_rel, 1
        cp = cp2
        for j in range(d):
            cp_ok[j] = cp[j]
        have_cp_ok = True
        phi_cur = phi_b
        if not have_psi:
            psi[:] = phi_cur
            have_psi = True
            psi_rel = 0.0
        else:
            psi_rel = _psi_track(psi, phi_cur, eta_psi)
        # ions parked at the representability floor are converged in x;
        # the gate and the descent metric run on the reducible residual
        rel = 0.0
        rel_g = 0.0
        hn = 0.0
        hmin = 0.0
        for a in range(da):
            j = idx[a]
            r = abs(np.exp(h[j]) - 1.0)
            if r > rel:
                rel = r
            if h[j] < hmin:
                hmin = h[j]
            if flr[j] == 0:
                if r > rel_g:
                    rel_g = r
                hn += h[j] * h[j]
        if rel_g <= tol_rel:
            while psi_rel > tol_rel and evals < max_iters:
                psi_rel = _psi_track(psi, phi_cur, eta_psi)
                evals += 1
            if psi_rel <= tol_rel:
                return cp, evals, rel, psi_rel, 0
            return cp, evals, rel, psi_rel, 3
        if hn < 0.98 * hn_best:
            hn_best = hn
            stall = 0
        else:
            stall += 1
            if stall >= 10 and hmin < -2.0:
                stall = 0
                if n_S < da - 1:
                    pick = -1
                    pickv = -1.0
                    for a in range(da):
                        j = idx[a]
                        if in_S[j] == 0 and cooldown[j] <= rounds:
                            if abs(h[j]) > pickv:
                                pickv = abs(h[j])
                                pick = j
                    if pick >= 0:
                        in_S[pick] = 1
                        n_S += 1
                        continue
        nb = 0
        B = np.zeros(da, dtype=np.int64)
        for a in range(da):
            if in_S[idx[a]] == 0:
                B[nb] = idx[a]
                nb += 1
        for j in range(d):
            fails[j] = 0
        stepped = False
        if nb > 0:
            J = np.zeros((nb, nb))
            jac_ok = True
            cand0 = np.zeros(nb)
            for b in range(nb):
                cand0[b] = cp[B[b]] * np.exp(h[B[b]])
            for a in range(nb):
                j = B[a]
                got = False
                for si in range(2):
                    if evals > max_iters:
                        break
                    sgn = 1.0 if si == 0 else -1.0
                    w = cp.copy()
                    w[j] = cp[j] * np.exp(sgn * dlt)
                    h_p, phi_p, wp2, okp, badp, demp, flp, ev = _slaved_eval_k(
                        feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot,
                        active, chi, jv, delta_f, dx, n_cells, u_max,
                        rtol_res, idx, in_S, n_S, False,
                    )
                    evals += ev
                    if not okp:
                        if badp >= 0:
                            fails[badp] += 1
                        continue
                    for bb in range(nb):
                        jj = B[bb]
                        candp = wp2[jj] * np.exp(h_p[jj])
                        J[bb, a] = np.log(candp / cand0[bb]) / (sgn * dlt)
                    got = True
                    break
                if not got:
                    jac_ok = False
                    break
            if jac_ok:
                A = np.zeros((nb, nb))
                rhs = np.zeros(nb)
                for a in range(nb):
                    for b in range(nb):
                        A[a, b] = J[a, b]
                    A[a, a] -= 1.0
                    rhs[a] = -h[B[a]]
                s, ok_s = _solve_linear(A, rhs)
                if ok_s:
                    for a in range(nb):
                        if not np.isfinite(s[a]):
                            ok_s = False
                if ok_s:
                    smax = 0.0
                    for a in range(nb):
                        v = abs(s[a])
                        if v > smax:
                            smax = v
                    if smax > 3.0:
                        fct = 3.0 / smax
                        for a in range(nb):
                            s[a] *= fct
                    alpha = 1.0
                    for _ in range(12):
                        if evals > max_iters:
                            break
                        w = cp.copy()
                        for a in range(nb):
                            w[B[a]] = cp[B[a]] * np.exp(alpha * s[a])
                        w = _project_en_k(w, z, idx, in_S, h, True, u_max)
                        h_t, phi_t, wt2, okt, badt, demt, flt, ev = _slaved_eval_k(
                            feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot,
                            active, chi, jv, delta_f, dx, n_cells, u_max,
                            rtol_res, idx, in_S, n_S, False,
                        )
                        evals += ev
                        if okt:
                            hnm = 0.0
                            hnt = 0.0
                            for a in range(da):
                                j2 = idx[a]
                                if flr[j2] == 0 and flt[j2] == 0:
                                    hnm += h[j2] * h[j2]
                                    hnt += h_t[j2] * h_t[j2]
                            if (
                                hnt <= hnm * (1.0 - 1e-4 * alpha)
                                and hnm - hnt > 1e-12 * hnm
                            ):
                                cp = wt2
                                stepped = True
                                break
                        elif badt >= 0:
                            fails[badt] += 1
                        alpha *= 0.5
        if stepped:
            continue
        if nb > 0 and evals <= max_iters:
            step_vec = np.zeros(d)
            rel_b = 0.0
            for a in range(nb):
                j = B[a]
                step_vec[j] = cp[j] * np.exp(h[j]) - cp[j]
                rb = abs(step_vec[j]) / cp[j]
                if rb > rel_b:
                    rel_b = rb
            if have_prev2:
                dot = 0.0
                for j in range(d):
                    dot += step_vec[j] * prev2[j]
                if dot < 0.0 and rel_b > 0.9999 * relb_prev:
                    eta2 = max(0.6 * eta2, 1e-3)
            prev2 = step_vec
            have_prev2 = True
            relb_prev = rel_b
            w = cp.copy()
            for a in range(nb):
                j = B[a]
                denom = step_vec[j]
                if denom == 0.0:
                    denom = 1.0
                fj = abs(cp[j] / denom)
                if fj > 1.0:
                    fj = 1.0
                w[j] = cp[j] * (1.0 + eta2 * fj * step_vec[j] / cp[j])
            w = _project_en_k(w, z, idx, in_S, h, True, u_max)
            done_sweep = False
            for _ in range(60):
                if evals > max_iters:
                    break
                h_t, phi_t, wt2, okt, badt, demt, flt, ev = _slaved_eval_k(
                    feed_c, w, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active,
                    chi, jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
                    in_S, n_S, False,
                )
                evals += ev
                if okt:
                    cp = wt2
                    done_sweep = True
                    break
                if badt >= 0:
                    fails[badt] += 1
                    if (
                        in_S[badt] == 0
                        and fails[badt] >= 6
                        and n_S < da - 1
                        and cooldown[badt] <= rounds
                    ):
                        in_S[badt] = 1
                        n_S += 1
                        continue
                for a in range(nb):
                    j = B[a]
                    w[j] = 0.5 * (w[j] + cp[j])
            if not done_sweep and evals <= max_iters:
                any_f = False
                for j in range(d):
                    if fails[j] > 0:
                        any_f = True
                if any_f and n_S < da - 1:
                    worst = -1
                    wv = 0
                    for j in range(d):
                        if fails[j] > wv:
                            wv = fails[j]
                            worst = j
                    if worst >= 0 and cooldown[worst] <= rounds:
                        in_S[worst] = 1
                        n_S += 1
                else:
                    return cp, evals, rel, psi_rel, 3
        elif nb == 0:
            h_t, phi_t, cpb, okt, badt, demt, flt, ev = _slaved_eval_k(
                feed_c, cp, z, kc_f, kdd_f, kc_p, kdd_p, a_tot, active,
                chi, jv, delta_f, dx, n_cells, u_max, rtol_res, idx,
                in_S, n_S, False,
            )
            evals += ev
            if not okt:
                if badt == -1:
                    return cp, evals, rel, psi_rel, 2
                if badt == -2:
                    return cp, evals, rel, psi_rel, 4
                return cp, evals, rel, psi_rel, 1
            cp = cpb
    return cp, evals, rel, psi_rel, 3
