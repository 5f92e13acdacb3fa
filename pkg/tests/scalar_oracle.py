"""Loop-only reference forward passes for both recommenders (no numpy maths)."""

import math


def _mat(a):
    return [list(map(float, row)) for row in a]


def _vec(a):
    return [float(v) for v in a]


def vecmat(x, W):
    # x: [k], W: [k][n]
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]


def layer_norm(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(x)]


def gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


def block(xs, P, prefix, heads, lora=None, lora_scale=2.0):
    """Pre-norm causal block on a list of position vectors."""
    width = len(xs[0])
    dh = width // heads
    p = lambda name: P[f"{prefix}.{name}"]  # noqa: E731
    hs = [layer_norm(x, _vec(p("ln1.g")), _vec(p("ln1.b"))) for x in xs]
    proj = {}
    for c in "qkv":
        W, bias = _mat(p(f"attn.w{c}")), _vec(p(f"attn.b{c}"))
        rows = [[a + b for a, b in zip(vecmat(h, W), bias)] for h in hs]
        if lora and c in lora:
            A, B = _mat(lora[c][0]), _mat(lora[c][1])
            for r, h in enumerate(hs):
                low = [sum(A[k][i] * h[i] for i in range(width)) for k in range(len(A))]
                delta = [sum(B[j][k] * low[k] for k in range(len(A))) for j in range(width)]
                rows[r] = [v + lora_scale * d for v, d in zip(rows[r], delta)]
        proj[c] = rows
    att = []
    for t in range(len(xs)):
        out = [0.0] * width
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            q = proj["q"][t][sl]
            scores = [sum(a * b for a, b in zip(q, proj["k"][s][sl])) / math.sqrt(dh) for s in range(t + 1)]
            m = max(scores)
            e = [math.exp(v - m) for v in scores]
            w = [v / sum(e) for v in e]
            for s in range(t + 1):
                for j, v in enumerate(proj["v"][s][sl]):
                    out[h * dh + j] += w[s] * v
        att.append(out)
    Wo, bo = _mat(p("attn.wo")), _vec(p("attn.bo"))
    xs = [[x + a + b for x, a, b in zip(xs[t], vecmat(att[t], Wo), bo)] for t in range(len(xs))]
    W1, b1, W2, b2 = _mat(p("ffn.w1")), _vec(p("ffn.b1")), _mat(p("ffn.w2")), _vec(p("ffn.b2"))
    res = []
    for x in xs:
        h = layer_norm(x, _vec(p("ln2.g")), _vec(p("ln2.b")))
        f = [gelu(a + b) for a, b in zip(vecmat(h, W1), b1)]
        res.append([v + a + b for v, a, b in zip(x, vecmat(f, W2), b2)])
    return res


def crm_scores(P, seq, layers, heads):
    E = _mat(P["item_emb"])
    pos = _mat(P["pos_emb"])
    d = len(E[0])
    xs = [[E[i][j] * math.sqrt(d) + pos[t][j] for j in range(d)] for t, i in enumerate(seq)]
    for layer in range(layers):
        xs = block(xs, P, f"block{layer}", heads)
    h = layer_norm(xs[-1], _vec(P["final_ln.g"]), _vec(P["final_ln.b"]))
    return [sum(a * b for a, b in zip(h, row)) for row in E]


def llm_scores(backbone, trainable, E, seq, layers, heads, lora_scale=2.0):
    E = _mat(E)
    W_in = _mat(trainable["w_in"])  # [D][d]
    F = [[sum(W_in[r][c] * e[c] for c in range(len(e))) for r in range(len(W_in))] for e in E]
    pos = _mat(backbone["pos_emb"])
    tokens = [_vec(trainable["bos"])] + [F[i] for i in seq]
    xs = [[v + pos[t][j] for j, v in enumerate(tok)] for t, tok in enumerate(tokens)]
    for layer in range(layers):
        lora = {c: (trainable[f"lora{layer}.{c}.A"], trainable[f"lora{layer}.{c}.B"]) for c in "qv"}
        xs = block(xs, backbone, f"block{layer}", heads, lora, lora_scale)
    g = layer_norm(xs[-1], _vec(backbone["final_ln.g"]), _vec(backbone["final_ln.b"]))
    return vecmat(g, _mat(trainable["w_out"]))
