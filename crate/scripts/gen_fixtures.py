#!/usr/bin/env python3
"""Writes the JSON fixtures in fixtures/ and checks each against Python integers."""

import json
import random
import sys
from pathlib import Path

M64 = (1 << 64) - 1


class Fn:
    def __init__(self, name, args):
        self.name = name
        self.args = args
        self.body = []
        self.n = 0

    def fresh(self):
        self.n += 1
        return f"x{self.n}"

    def op(self, op, ins, nout=1, width=None):
        outs = [self.fresh() for _ in range(nout)]
        d = {"out": outs, "op": op, "in": [str(i) for i in ins]}
        if width:
            d["width"] = width
        self.body.append(d)
        return outs if nout > 1 else outs[0]

    def spec(self, returns):
        return {"name": self.name, "args": [{"name": n, "type": t} for n, t in self.args],
                "returns": returns, "body": self.body}


def interpret(spec, inputs):
    env = {}
    it = iter(inputs)
    for a in spec["args"]:
        t = a["type"]
        if "[" in t:
            n = int(t[t.index("[") + 1:-1])
            for i in range(n):
                env[f"{a['name']}[{i}]"] = next(it)
        else:
            env[a["name"]] = next(it)

    def val(s):
        if s in env:
            return env[s]
        return int(s, 0)

    for o in spec["body"]:
        x = [val(i) for i in o["in"]]
        op = o["op"]
        if op == "mulx":
            p = x[0] * x[1]
            r = [p & M64, p >> 64]
        elif op == "addcarryx":
            s = x[0] + x[1] + x[2]
            r = [s & M64, s >> 64]
        elif op == "subborrowx":
            s = x[1] - x[2] - x[0]
            r = [s & M64, 1 if s < 0 else 0]
        elif op == "*":
            r = [(x[0] * x[1]) & M64]
        elif op == "+":
            r = [(x[0] + x[1]) & M64]
        elif op == "&":
            r = [x[0] & x[1]]
        elif op == "or":
            r = [x[0] | x[1]]
        elif op == ">>" and len(x) == 3:
            r = [(((x[1] << 64) | x[0]) >> x[2]) & M64]
        elif op == ">>":
            r = [x[0] >> x[1]]
        elif op == "<<":
            r = [(x[0] << x[1]) & M64]
        elif op == "cmovznz":
            r = [x[1] if x[0] == 0 else x[2]]
        elif op == "static_cast":
            r = [x[0] & (1 if o["width"] == "u1" else M64)]
        else:
            raise ValueError(op)
        for name, v in zip(o["out"], r):
            env[name] = v
    return [val(r) for r in spec["returns"]]


def limbs(v, n):
    return [(v >> (64 * i)) & M64 for i in range(n)]


def join(ls):
    return sum(l << (64 * i) for i, l in enumerate(ls))


def add_chain(f, xs, ys, carry="0x0"):
    out = []
    for x, y in zip(xs, ys):
        s, carry = f.op("addcarryx", [carry, x, y], 2)
        out.append(s)
    return out, carry


def p25519_mul():
    """4x64-bit limbs modulo 2^255-19; result is congruent, below 2^256."""
    f = Fn("p25519_mul", [("out1", "u64[4]"), ("a", "u64[4]"), ("b", "u64[4]")])
    del f.args[0]
    a = [f"a[{i}]" for i in range(4)]
    b = [f"b[{i}]" for i in range(4)]
    t = None
    for i in range(4):
        lo, hi = zip(*[f.op("mulx", [a[i], b[j]], 2) for j in range(4)])
        row_mid, c = add_chain(f, lo[1:], hi[:3])
        top = f.op("addcarryx", [c, hi[3], "0x0"], 2)[0]
        row = [lo[0]] + row_mid + [top]
        if t is None:
            t = row
        else:
            s, c = add_chain(f, t[i:], row[:4])
            last = f.op("addcarryx", [c, row[4], "0x0"], 2)[0]
            t = t[:i] + s + [last]
    # 2^256 = 38 (mod p)
    lo, hi = zip(*[f.op("mulx", [t[4 + k], "0x26"], 2) for k in range(4)])
    u, c = add_chain(f, t[:4], lo)
    top = f.op("addcarryx", [c, hi[3], "0x0"], 2)[0]
    v, d = add_chain(f, u[1:], hi[:3])
    top = f.op("addcarryx", [d, top, "0x0"], 2)[0]
    fold = f.op("*", [top, "0x26"])
    w, c = add_chain(f, [u[0]] + v, [fold, "0x0", "0x0", "0x0"])
    extra = f.op("cmovznz", [c, "0x0", "0x26"])
    w0 = f.op("+", [w[0], extra])
    spec = f.spec([w0] + w[1:])

    p = (1 << 255) - 19
    rng = random.Random(1)
    for _ in range(2000):
        x = rng.getrandbits(256)
        y = rng.getrandbits(256)
        if rng.random() < 0.1:
            x = (1 << 256) - 1 - rng.getrandbits(8)
        got = join(interpret(spec, limbs(x, 4) + limbs(y, 4)))
        assert got % p == (x * y) % p and got < (1 << 256), (x, y)
    return spec


def mulmod61():
    f = Fn("mulmod61", [("a", "u64"), ("b", "u64")])
    m = hex((1 << 61) - 1)
    lo, hi = f.op("mulx", ["a", "b"], 2)
    q = f.op(">>", [lo, hi, "61"])
    r = f.op("+", [f.op("&", [lo, m]), q])
    r = f.op("+", [f.op("&", [r, m]), f.op(">>", [r, "61"])])
    spec = f.spec([r])
    p = (1 << 61) - 1
    rng = random.Random(2)
    for _ in range(2000):
        x, y = rng.randrange(p), rng.randrange(p)
        got = interpret(spec, [x, y])[0]
        assert got % p == (x * y) % p and got < (1 << 62)
    return spec


def add4():
    f = Fn("add4", [("a", "u64[4]"), ("b", "u64[4]")])
    s, c = add_chain(f, [f"a[{i}]" for i in range(4)], [f"b[{i}]" for i in range(4)])
    spec = f.spec(s + [c])
    rng = random.Random(3)
    for _ in range(1000):
        x, y = rng.getrandbits(256), rng.getrandbits(256)
        assert join(interpret(spec, limbs(x, 4) + limbs(y, 4))) == x + y
    return spec


def sub4():
    f = Fn("sub4", [("a", "u64[4]"), ("b", "u64[4]")])
    borrow = "0x0"
    out = []
    for i in range(4):
        d, borrow = f.op("subborrowx", [borrow, f"a[{i}]", f"b[{i}]"], 2)
        out.append(d)
    spec = f.spec(out + [borrow])
    rng = random.Random(4)
    for _ in range(1000):
        x, y = rng.getrandbits(256), rng.getrandbits(256)
        r = interpret(spec, limbs(x, 4) + limbs(y, 4))
        assert join(r[:4]) == (x - y) % (1 << 256) and r[4] == (1 if x < y else 0)
    return spec


def select4():
    f = Fn("select4", [("c", "u1"), ("a", "u64[4]"), ("b", "u64[4]")])
    out = [f.op("cmovznz", ["c", f"a[{i}]", f"b[{i}]"]) for i in range(4)]
    spec = f.spec(out)
    rng = random.Random(5)
    for _ in range(200):
        c, x, y = rng.getrandbits(1), rng.getrandbits(256), rng.getrandbits(256)
        assert join(interpret(spec, [c] + limbs(x, 4) + limbs(y, 4))) == (y if c else x)
    return spec


def mul8():
    f = Fn("mul8", [("a", "u64[2]"), ("b", "u64[2]")])
    y0 = f.op("+", [f.op("*", ["a[0]", "0x8"]), "b[0]"])
    y1 = f.op("+", [f.op("*", ["a[1]", "0x8"]), "b[1]"])
    spec = f.spec([y0, y1])
    assert interpret(spec, [3, 5, 7, 11]) == [31, 51]
    return spec


FIXED = {
    "add1": {"name": "add1", "args": [{"name": "a", "type": "u64[1]"}, {"name": "b", "type": "u64[1]"}],
             "returns": ["x1"], "body": [{"out": ["x1"], "op": "+", "in": ["a[0]", "b[0]"]}]},
    "identity": {"name": "identity", "args": [{"name": "a", "type": "u64[1]"}], "returns": ["a[0]"], "body": []},
}


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures")
    out.mkdir(exist_ok=True)
    specs = dict(FIXED)
    for gen in (mul8, mulmod61, add4, sub4, select4, p25519_mul):
        s = gen()
        specs[s["name"]] = s
    for name, s in specs.items():
        (out / f"{name}.json").write_text(json.dumps(s, indent=1) + "\n")
        print(f"{name}: {len(s['body'])} operations")


if __name__ == "__main__":
    main()
