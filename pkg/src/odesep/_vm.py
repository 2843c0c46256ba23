"""Compiled right-hand sides and the Dormand-Prince integrator.

Equations are lowered to a postfix program run by a small jitted stack
machine, so a single compiled integrator serves every model. Domain
violations stop the machine and report the instruction index, which maps
back to the offending expression node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .expr import CONSTANTS, Bin, Call, Const, Neg, Sym

OP_CONST, OP_STATE, OP_PARAM, OP_TIME, OP_INPUT = 0, 1, 2, 3, 4
OP_NEG, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = 5, 6, 7, 8, 9, 10
OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_SQRT, OP_ABS = 11, 12, 13, 14, 15, 16
OP_STORE = 17

_BINOPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_CALLS = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT, "abs": OP_ABS}

STATUS_OK = 0
STATUS_DOMAIN = 1
STATUS_NONFINITE = 2
STATUS_UNDERFLOW = 3
STATUS_MAXSTEPS = 4


@dataclass(frozen=True)
class Program:
    ops: np.ndarray
    args: np.ndarray
    consts: np.ndarray
    stack_size: int
    nodes: tuple

    def node_at(self, index):
        return self.nodes[index] if 0 <= index < len(self.nodes) else None


def compile_model(model) -> Program:
    """Lower every equation of ``model`` into one postfix program."""
    state = {v: i for i, v in enumerate(model.variables)}
    param = {p: i for i, p in enumerate(model.parameters)}
    inp = {u: i for i, u in enumerate(model.inputs)}
    ops, args, nodes, consts = [], [], [], []
    depth = [0, 0]

    def push(op, arg, node, delta):
        ops.append(op)
        args.append(arg)
        nodes.append(node)
        depth[0] += delta
        depth[1] = max(depth[1], depth[0])

    def const(v):
        consts.append(float(v))
        return len(consts) - 1

    def emit(e):
        if isinstance(e, Const):
            push(OP_CONST, const(e.value), e, 1)
        elif isinstance(e, Sym):
            n = e.name
            if n in state:
                push(OP_STATE, state[n], e, 1)
            elif n in param:
                push(OP_PARAM, param[n], e, 1)
            elif n in inp:
                push(OP_INPUT, inp[n], e, 1)
            elif n == "t":
                push(OP_TIME, 0, e, 1)
            elif n in CONSTANTS:
                push(OP_CONST, const(CONSTANTS[n]), e, 1)
            else:
                raise KeyError(n)
        elif isinstance(e, Neg):
            emit(e.child)
            push(OP_NEG, 0, e, 0)
        elif isinstance(e, Bin):
            emit(e.left)
            emit(e.right)
            push(_BINOPS[e.op], 0, e, -1)
        elif isinstance(e, Call):
            emit(e.arg)
            push(_CALLS[e.func], 0, e, 0)
        else:  # pragma: no cover
            raise TypeError(type(e))

    for j, e in enumerate(model.equations):
        emit(e)
        push(OP_STORE, j, e, -1)
    return Program(
        ops=np.asarray(ops, dtype=np.int64),
        args=np.asarray(args, dtype=np.int64),
        consts=np.asarray(consts if consts else [0.0], dtype=np.float64),
        stack_size=max(depth[1], 1),
        nodes=tuple(nodes),
    )


@njit(cache=True, error_model="numpy")
def interp_input(t, tt, vv, n, mode, left):
    """Tabulated input at ``t``; ``left`` takes the left limit of a step signal at a knot."""
    if t <= tt[0]:
        return vv[0]
    if t >= tt[n - 1]:
        lo = n - 1
    else:
        lo = 0
        hi = n - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if tt[mid] <= t:
                lo = mid
            else:
                hi = mid
    if mode == 1:
        if left and lo > 0 and tt[lo] == t:
            return vv[lo - 1]
        return vv[lo]
    if lo == n - 1:
        return vv[n - 1]
    w = (t - tt[lo]) / (tt[lo + 1] - tt[lo])
    return vv[lo] + w * (vv[lo + 1] - vv[lo])


@njit(cache=True, error_model="numpy")
def run_program(ops, args, consts, x, p, t, u, out, stack):
    """Evaluate into ``out``; returns -1 or the index of a failing instruction."""
    sp = 0
    for i in range(ops.shape[0]):
        op = ops[i]
        if op == OP_CONST:
            stack[sp] = consts[args[i]]
            sp += 1
        elif op == OP_STATE:
            stack[sp] = x[args[i]]
            sp += 1
        elif op == OP_PARAM:
            stack[sp] = p[args[i]]
            sp += 1
        elif op == OP_TIME:
            stack[sp] = t
            sp += 1
        elif op == OP_INPUT:
            stack[sp] = u[args[i]]
            sp += 1
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_STORE:
            sp -= 1
            out[args[i]] = stack[sp]
        elif op <= OP_POW:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                r = a + b
            elif op == OP_SUB:
                r = a - b
            elif op == OP_MUL:
                r = a * b
            elif op == OP_DIV:
                if b == 0.0:
                    return i
                r = a / b
            else:
                if a < 0.0 and b != math.floor(b):
                    return i
                if a == 0.0 and b < 0.0:
                    return i
                r = a**b
            if r != r:
                return i
            stack[sp - 1] = r
        else:
            a = stack[sp - 1]
            if op == OP_SIN:
                r = math.sin(a)
            elif op == OP_COS:
                r = math.cos(a)
            elif op == OP_EXP:
                r = math.exp(a)
            elif op == OP_LOG:
                if a <= 0.0:
                    return i
                r = math.log(a)
            elif op == OP_SQRT:
                if a < 0.0:
                    return i
                r = math.sqrt(a)
            else:
                r = abs(a)
            if r != r:
                return i
            stack[sp - 1] = r
    return -1


@njit(cache=True, error_model="numpy")
def _rhs(ops, args, consts, x, p, t, ut, uv, ulen, umode, u, out, stack, left=False):
    for k in range(ulen.shape[0]):
        u[k] = interp_input(t, ut[k], uv[k], ulen[k], umode[k], left)
    return run_program(ops, args, consts, x, p, t, u, out, stack)


@njit(cache=True, error_model="numpy")
def _norm(v, y0, y1, rtol, atol):
    s = 0.0
    for i in range(v.shape[0]):
        sc = atol + rtol * max(abs(y0[i]), abs(y1[i]))
        s += (v[i] / sc) ** 2
    return math.sqrt(s / v.shape[0])


# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = 9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)


@njit(cache=True, error_model="numpy", nogil=True)
def dopri5(ops, args, consts, stack_size, p, x0, t_out, ut, uv, ulen, umode, rtol, atol, max_steps, breaks):
    """Integrate from ``t_out[0]`` and sample at every entry of ``t_out``.

    Steps never cross an entry of the sorted ``breaks`` (input knots), so
    jumps in tabulated inputs are resolved rather than stepped over.

    Returns ``(values, status, fail_time, fail_instr, n_steps)``.
    """
    d = x0.shape[0]
    m = t_out.shape[0]
    Y = np.full((m, d), np.nan)
    stack = np.empty(stack_size)
    u = np.empty(max(ulen.shape[0], 1))
    y = x0.copy()
    Y[0, :] = y
    for i in range(d):
        if not np.isfinite(y[i]):
            return Y, STATUS_NONFINITE, t_out[0], -1, 0
    if m == 1:
        return Y, STATUS_OK, 0.0, -1, 0
    t = t_out[0]
    t_end = t_out[m - 1]
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    k5 = np.empty(d)
    k6 = np.empty(d)
    k7 = np.empty(d)
    ys = np.empty(d)
    ynew = np.empty(d)
    err = np.empty(d)

    code = _rhs(ops, args, consts, y, p, t, ut, uv, ulen, umode, u, k1, stack)
    if code >= 0:
        return Y, STATUS_DOMAIN, t, code, 0
    for i in range(d):
        if not np.isfinite(k1[i]):
            return Y, STATUS_NONFINITE, t, -1, 0

    # initial step (Hairer, Norsett & Wanner, II.4)
    span = t_end - t
    d0 = _norm(y, y, y, rtol, atol)
    d1 = _norm(k1, y, y, rtol, atol)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, span)
    for i in range(d):
        ys[i] = y[i] + h0 * k1[i]
    code = _rhs(ops, args, consts, ys, p, t + h0, ut, uv, ulen, umode, u, k2, stack)
    if code >= 0:
        h = h0 * 1e-3
    else:
        for i in range(d):
            err[i] = k2[i] - k1[i]
        d2 = _norm(err, y, y, rtol, atol) / h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
        h = min(100.0 * h0, h1)
    h = min(h, span)

    beta = 0.04
    expo1 = 0.2 - beta * 0.75
    safe = 0.9
    facc1 = 5.0
    facc2 = 0.1
    facold = 1e-4
    reject = False
    last_domain = -1
    e = 0.0
    k_out = 1
    steps = 0
    eps = 2.220446049250313e-16
    nb = breaks.shape[0]
    ib = 0
    while ib < nb and breaks[ib] <= t:
        ib += 1
    while t < t_end:
        if steps >= max_steps:
            return Y, STATUS_MAXSTEPS, t, -1, steps
        if h < 16.0 * eps * max(abs(t), 1.0):
            if last_domain >= 0:
                return Y, STATUS_DOMAIN, t, last_domain, steps
            return Y, STATUS_UNDERFLOW, t, -1, steps
        seg_end = t_end
        if ib < nb and breaks[ib] < t_end:
            seg_end = breaks[ib]
        hit = False
        if t + h > seg_end or t + 1.01 * h >= seg_end:
            h = seg_end - t
            hit = True
        t_end_step = seg_end if hit else t + h
        steps += 1
        ok = True
        for i in range(d):
            ys[i] = y[i] + h * _A21 * k1[i]
        code = _rhs(ops, args, consts, ys, p, t + _C2 * h, ut, uv, ulen, umode, u, k2, stack)
        if code < 0:
            for i in range(d):
                ys[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
            code = _rhs(ops, args, consts, ys, p, t + _C3 * h, ut, uv, ulen, umode, u, k3, stack)
        if code < 0:
            for i in range(d):
                ys[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
            code = _rhs(ops, args, consts, ys, p, t + _C4 * h, ut, uv, ulen, umode, u, k4, stack)
        if code < 0:
            for i in range(d):
                ys[i] = y[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i])
            code = _rhs(ops, args, consts, ys, p, t + _C5 * h, ut, uv, ulen, umode, u, k5, stack)
        if code < 0:
            for i in range(d):
                ys[i] = y[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i] + _A65 * k5[i])
            code = _rhs(ops, args, consts, ys, p, t_end_step, ut, uv, ulen, umode, u, k6, stack, hit)
        if code < 0:
            for i in range(d):
                ynew[i] = y[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i] + _B6 * k6[i])
            code = _rhs(ops, args, consts, ynew, p, t_end_step, ut, uv, ulen, umode, u, k7, stack, hit)
        if code >= 0:
            last_domain = code
            ok = False
        if ok:
            for i in range(d):
                err[i] = h * (
                    _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i]
                )
            e = _norm(err, y, ynew, rtol, atol)
            if not np.isfinite(e):
                ok = False
        if not ok:
            h *= 0.25
            reject = True
            continue
        fac11 = e**expo1
        fac = fac11 / facold**beta
        fac = max(facc2, min(facc1, fac / safe))
        hnew = h / fac
        if e <= 1.0:
            last_domain = -1
            facold = max(e, 1e-4)
            t_next = t_end_step
            while k_out < m and t_out[k_out] <= t_next:
                th = (t_out[k_out] - t) / h
                h00 = (1.0 + 2.0 * th) * (1.0 - th) ** 2
                h10 = th * (1.0 - th) ** 2
                h01 = th * th * (3.0 - 2.0 * th)
                h11 = th * th * (th - 1.0)
                for i in range(d):
                    Y[k_out, i] = h00 * y[i] + h10 * h * k1[i] + h01 * ynew[i] + h11 * h * k7[i]
                k_out += 1
            t = t_next
            for i in range(d):
                y[i] = ynew[i]
                k1[i] = k7[i]
            if hit and ib < nb and t >= breaks[ib]:
                while ib < nb and breaks[ib] <= t:
                    ib += 1
                # the signal may jump here: restart from the right limit
                code = _rhs(ops, args, consts, y, p, t, ut, uv, ulen, umode, u, k1, stack)
                if code >= 0:
                    return Y, STATUS_DOMAIN, t, code, steps
            if reject:
                hnew = min(hnew, h)
            reject = False
            h = hnew
        else:
            h = h / min(facc1, fac11 / safe)
            reject = True
    while k_out < m:
        for i in range(d):
            Y[k_out, i] = y[i]
        k_out += 1
    return Y, STATUS_OK, t, -1, steps
