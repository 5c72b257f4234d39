#!/usr/bin/env python3
"""Generates tiny_forward.json: a 1-layer/1-head encoder forward evaluated
independently with NumPy, frozen as a test vector for the C++ implementation.
"""
import json

import numpy as np

rng = np.random.default_rng(20240517)

L, AH, DH, DF, V, MAXLEN = 1, 1, 4, 8, 6, 4
EPS = 1e-12


def rnd(*shape):
    return rng.uniform(-0.5, 0.5, size=shape)


def layernorm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + EPS) + bias


def gelu(x):
    c = 0.7978845608028654  # sqrt(2/pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


weights = {
    "embed.token": rnd(V, DH),
    "embed.position": rnd(MAXLEN, DH),
    "layer.0.attn.wq": rnd(DH, DH),
    "layer.0.attn.bq": rnd(DH),
    "layer.0.attn.wk": rnd(DH, DH),
    "layer.0.attn.bk": rnd(DH),
    "layer.0.attn.wv": rnd(DH, DH),
    "layer.0.attn.bv": rnd(DH),
    "layer.0.attn.wo": rnd(DH, DH),
    "layer.0.attn.bo": rnd(DH),
    "layer.0.ln1.gain": rnd(DH) + 1.0,
    "layer.0.ln1.bias": rnd(DH),
    "layer.0.ff.w1": rnd(DH, DF),
    "layer.0.ff.b1": rnd(DF),
    "layer.0.ff.w2": rnd(DF, DH),
    "layer.0.ff.b2": rnd(DH),
    "layer.0.ln2.gain": rnd(DH) + 1.0,
    "layer.0.ln2.bias": rnd(DH),
    "head.weight": rnd(DH, V),
    "head.bias": rnd(V),
}

tokens = [2, 5]
w = weights
h0 = w["embed.token"][tokens] + w["embed.position"][: len(tokens)]

q = h0 @ w["layer.0.attn.wq"] + w["layer.0.attn.bq"]
k = h0 @ w["layer.0.attn.wk"] + w["layer.0.attn.bk"]
v = h0 @ w["layer.0.attn.wv"] + w["layer.0.attn.bv"]
dk = DH // AH
attn = softmax(q @ k.T / np.sqrt(dk))
mha = (attn @ v) @ w["layer.0.attn.wo"] + w["layer.0.attn.bo"]
h = layernorm(h0 + mha, w["layer.0.ln1.gain"], w["layer.0.ln1.bias"])

ff = gelu(h @ w["layer.0.ff.w1"] + w["layer.0.ff.b1"]) @ w["layer.0.ff.w2"] + w["layer.0.ff.b2"]
h1 = layernorm(h + ff, w["layer.0.ln2.gain"], w["layer.0.ln2.bias"])
logits = h1 @ w["head.weight"] + w["head.bias"]

out = {
    "config": {"num_layers": L, "num_heads": AH, "hidden_size": DH, "ff_size": DF,
               "vocab_size": V, "max_seq_len": MAXLEN},
    "tokens": tokens,
    "weights": {name: {"shape": list(arr.shape), "data": arr.flatten().tolist()}
                for name, arr in weights.items()},
    "expected_h0": h0.flatten().tolist(),
    "expected_attention": attn.flatten().tolist(),
    "expected_h1": h1.flatten().tolist(),
    "expected_logits": logits.flatten().tolist(),
}

with open("tiny_forward.json", "w") as f:
    json.dump(out, f, indent=1)
print("wrote tiny_forward.json")
