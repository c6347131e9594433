"""Independent scalar-loop reference for the routing network.

Everything here works on nested Python lists with explicit index loops
and ``math`` functions, so it shares no code path with the tensorized
implementation. numpy only appears at the conversion boundary.
"""

import math

import numpy as np


def as_list(x):
    data = x.data if hasattr(x, "data") else x
    return np.asarray(data, dtype=np.float64).tolist()


def mm(a, b):
    p, q, r = len(a), len(b), len(b[0])
    out = [[0.0] * r for _ in range(p)]
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return out


def mv(a, x):
    out = []
    for row in a:
        s = 0.0
        for k in range(len(x)):
            s += row[k] * x[k]
        out.append(s)
    return out


def tr(a):
    return [[a[i][j] for i in range(len(a))] for j in range(len(a[0]))]


def madd(a, b):
    return [[a[i][j] + b[i][j] for j in range(len(a[0]))] for i in range(len(a))]


def msub(a, b):
    return [[a[i][j] - b[i][j] for j in range(len(a[0]))] for i in range(len(a))]


def mhad(a, b):
    return [[a[i][j] * b[i][j] for j in range(len(a[0]))] for i in range(len(a))]


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def msigmoid(a):
    return [[sigmoid(v) for v in row] for row in a]


def softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def softmax_vec(v):
    m = max(v)
    exps = [math.exp(x - m) for x in v]
    z = sum(exps)
    return [e / z for e in exps]


def row_softmax(a):
    return [softmax_vec(row) for row in a]


def col_softmax(a):
    return tr([softmax_vec(col) for col in tr(a)])


def pool_cols(a):
    n = len(a[0])
    return [sum(row) / n for row in a]


def broadcast_cols(v, n):
    return [[x] * n for x in v]


def diag_scale(a, g):
    return [[a[i][j] * g[j] for j in range(len(g))] for i in range(len(a))]


def col_sums(a):
    return [sum(a[i][j] for i in range(len(a))) for j in range(len(a[0]))]


def squash_cols(a):
    out = []
    for j in range(len(a[0])):
        q = sum(a[i][j] * a[i][j] for i in range(len(a)))
        out.append(q / (1.0 + q))
    return out


def col_normalize(a, eps=1e-5):
    d, n = len(a), len(a[0])
    out = [[0.0] * n for _ in range(d)]
    for j in range(n):
        mu = sum(a[i][j] for i in range(d)) / d
        var = sum((a[i][j] - mu) ** 2 for i in range(d)) / d
        sigma = math.sqrt(var + eps)
        for i in range(d):
            out[i][j] = (a[i][j] - mu) / sigma
    return out


def exchangeable_mix(w, s):
    n = len(s)
    diag_mean = sum(w[i][i] for i in range(n)) / n
    off = n * n - n
    off_mean = (sum(sum(row) for row in w) - sum(w[i][i] for i in range(n))) / off if off else 0.0
    total = sum(s)
    return [diag_mean * s[i] + off_mean * (total - s[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# modules


def ref_focal(v, p):
    comp = mm(tr(mm(p["W_1"], v)), mm(p["W_2"], v))
    attention = row_softmax(comp)
    gates = [sigmoid(x) for x in exchangeable_mix(p["W_3"], col_sums(comp))]
    return mm(diag_scale(v, gates), tr(attention))


def ref_identity(v):
    return v


def _ref_modulate(v, scale, shift):
    return madd(mhad(scale, col_normalize(v)), shift)


def ref_global(v, q, p):
    n = len(v[0])
    pooled = broadcast_cols(pool_cols(q), n)
    scale = msigmoid(madd(mm(p["W_a"], pooled), broadcast_cols(p["b_a"], n)))
    shift = msigmoid(madd(mm(p["W_eta"], pooled), broadcast_cols(p["b_eta"], n)))
    return _ref_modulate(v, scale, shift)


def ref_local(v, q, p):
    n = len(v[0])
    scores = mm(tr(mm(p["W_4"], q)), mm(p["W_5"], v))
    attention = col_softmax(scores)
    context = mm(q, attention)
    scale = msigmoid(madd(mm(p["W_a_p"], context), broadcast_cols(p["b_a_p"], n)))
    shift = msigmoid(madd(mm(p["W_eta_p"], context), broadcast_cols(p["b_eta_p"], n)))
    return _ref_modulate(v, scale, shift)


def ref_knowledge(v, k, p):
    affinity = mm(tr(mm(p["W_6"], k)), mm(p["W_7"], v))
    attention = col_softmax(affinity)
    context = mm(k, attention)
    gate = msigmoid(msub(mm(p["W_8"], v), mm(p["W_9"], context)))
    keep = [[1.0 - g for g in row] for row in gate]
    return madd(mhad(gate, context), mhad(keep, v))


def ref_dispatch(mid, v, q, k, params):
    if mid == "R1":
        return ref_focal(v, params["R1"])
    if mid == "R2":
        return ref_identity(v)
    if mid == "R3":
        return ref_global(v, q, params["R3"])
    if mid == "R4":
        return ref_local(v, q, params["R4"])
    if mid == "R5":
        return ref_knowledge(v, k, params["R5"])
    raise ValueError(mid)


# ---------------------------------------------------------------------------
# layer and network


def ref_route_gates(v, w_g):
    return [sigmoid(x) for x in mv(w_g, pool_cols(v))]


def ref_layer_step(v_list, u, b_list, q, k, module_ids, params):
    m = len(module_ids)
    gates = [ref_route_gates(v_list[i], params["routers"][module_ids[i]]) for i in range(m)]
    outs = [ref_dispatch(module_ids[i], v_list[i], q, k, params) for i in range(m)]
    d, n = len(u), len(u[0])
    new_v = []
    for dest in range(m):
        total = None
        for src in range(m):
            term = [[gates[src][dest] * outs[src][i][j] for j in range(n)] for i in range(d)]
            total = term if total is None else madd(total, term)
        new_v.append(total)
    new_b = []
    couplings = []
    for i in range(m):
        rates = squash_cols(mhad(new_v[i], u))
        nb = [b_list[i][j] + rates[j] for j in range(n)]
        new_b.append(nb)
        couplings.append(softmax_vec(nb))
    h = None
    for i in range(m):
        term = diag_scale(new_v[i], couplings[i])
        h = term if h is None else madd(h, term)
    delta = msub(h, u)
    z_u = msigmoid(mm(params["mem"]["W_u"], delta))
    z_r = msigmoid(mm(params["mem"]["W_r"], delta))
    candidate = madd(mm(params["mem"]["W_z"], mhad(z_r, u)), mm(params["mem"]["W_h"], h))
    keep = [[1.0 - z for z in row] for row in z_u]
    new_u = madd(mhad(keep, u), mhad(z_u, candidate))
    return new_v, new_u, new_b, h, gates


def ref_encode(f, qhat, kraw, params):
    v = mm(params["enc"]["W_proj"], f)
    logits = mm(params["enc"]["W_Qhat"], qhat)[0]
    attention = softmax_vec(logits)
    q = diag_scale(qhat, attention)
    k = mm(params["enc"]["W_k"], kraw)
    return v, q, k


def ref_network_from_encoded(v0, q, k, params, module_ids, t_steps):
    n = len(v0[0])
    m = len(module_ids)
    u = broadcast_cols(pool_cols(q), n)
    v_list = [v0 for _ in range(m)]
    b_list = [[0.0] * n for _ in range(m)]
    gate_history = []
    for _ in range(t_steps):
        v_list, u, b_list, _, gates = ref_layer_step(v_list, u, b_list, q, k, module_ids, params)
        gate_history.append(gates)
    return u, gate_history


def ref_run_network(f, qhat, kraw, params, module_ids, t_steps):
    v0, q, k = ref_encode(f, qhat, kraw, params)
    u, gate_history = ref_network_from_encoded(v0, q, k, params, module_ids, t_steps)
    return u, q, gate_history


def ref_predict_logits(u, q, params):
    merged_u = mv(params["head"]["W_u"], pool_cols(u))
    merged_q = mv(params["head"]["W_q"], pool_cols(q))
    merged = [merged_u[i] + merged_q[i] for i in range(len(merged_u))]
    return mv(params["head"]["W_y"], merged)


def ref_bce(logits, labels):
    total = 0.0
    for z, l in zip(logits, labels):
        total += l * softplus(-z) + (1.0 - l) * softplus(z)
    return total / len(logits)


def ref_full_loss(f, qhat, kraw, labels, params, module_ids, t_steps):
    u, q, _ = ref_run_network(f, qhat, kraw, params, module_ids, t_steps)
    return ref_bce(ref_predict_logits(u, q, params), labels)


# ---------------------------------------------------------------------------
# parameter conversion boundary


def params_as_lists(model):
    """Convert a ModelParams object into the nested-list dict the refs use."""
    out = {"enc": {}, "routers": {}, "mem": {}, "head": {}}
    for name, t in model.named_tensors():
        group, _, leaf = name.partition(".")
        value = as_list(t)
        if group == "enc":
            out["enc"][leaf] = value
        elif group in ("R1", "R3", "R4", "R5"):
            out.setdefault(group, {})[leaf] = value
        elif group == "layer":
            idx = leaf.split(".")[-1]
            out["routers"][f"R{idx}"] = value
        elif group == "mem":
            out["mem"][leaf] = value
        elif group == "head":
            out["head"][leaf] = value
    return out


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
