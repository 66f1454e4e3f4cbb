"""Independent MAC / parameter counter for the golden profiler totals.

Walks the MobileNetV3-Large table directly with plain integer arithmetic and
writes crates/core/tests/data/mac_golden.json.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/data/mac_golden.json"

TABLE = [  # kernel, expansion, out, se, stride
    (3, 16, 16, 0, 1), (3, 64, 24, 0, 2), (3, 72, 24, 0, 1),
    (5, 72, 40, 1, 2), (5, 120, 40, 1, 1), (5, 120, 40, 1, 1),
    (3, 240, 80, 0, 2), (3, 200, 80, 0, 1), (3, 184, 80, 0, 1),
    (3, 184, 80, 0, 1), (3, 480, 112, 1, 1), (3, 672, 112, 1, 1),
    (5, 672, 160, 1, 2), (5, 960, 160, 1, 1), (5, 960, 160, 1, 1),
]
K, M, CLASSES = 4, 2, 527


def div8(v):
    n = max(8, int(v + 4) // 8 * 8)
    return n + 8 if n < 0.9 * v else n


def half(n, k, s):
    return (n + 2 * (k // 2) - k) // s + 1


def count(alpha, dynamic, mels=128, frames=1000):
    f, t = half(mels, 3, 2), half(frames, 3, 2)
    c = div8(16 * alpha)
    macs = c * 9 * f * t
    params = c * 9 + 2 * c
    ratios = []
    lo, hi = round(32 * alpha), round(128 * alpha)
    for k, e, o, se, s in TABLE:
        ce, co = div8(e * alpha), div8(o * alpha)
        fo, to = half(f, k, s), half(t, k, s)
        h = int(min(max(round(ce / 4), lo), hi))
        expand = dynamic or ce != c
        convs = []  # (kernel elements, spatial positions, out channels)
        if expand:
            convs.append((c * ce, f * t, ce))
        convs.append((ce * k * k, fo * to, ce))
        convs.append((ce * co, fo * to, co))
        static = sum(w * p for w, p, _ in convs)
        params += sum(w + 2 * ch for w, _, ch in convs)
        overhead = 0
        if dynamic:
            params += (K - 1) * sum(w for w, _, _ in convs)
            overhead += c * h * (f + t)                       # context
            params += c * h + 2 * h
            overhead += sum(K * w + h * K for w, _, _ in convs)  # aggregation + attention
            params += len(convs) * (h * K + K)
            overhead += M * ce * fo * to + h * 2 * M * ce       # dy-relu mappings + predictor
            params += (h + 1) * 2 * M * ce
            overhead += h * ce * (fo + to)                      # coordinate attention
            params += 2 * (h * ce + ce)
        elif se:
            sq = div8(ce / 4)
            static += 2 * ce * sq
            params += 2 * ce * sq + sq + ce
        macs += static + overhead
        ratios.append(overhead / static)
        c, f, t = co, fo, to
    head = 6 * c
    hidden = max(div8(1280 * alpha), round(1280 * min(alpha, 1.0)))
    macs += c * head * f * t + head * hidden + hidden * CLASSES
    params += c * head + 2 * head + head * hidden + hidden + hidden * CLASSES + CLASSES
    return {"macs": macs, "params": params, "block_overhead_ratios": ratios}


def main():
    golden = {
        "frames": 1000,
        "mn-1.0": count(1.0, False),
        "dymn-s": count(0.4, True),
        "dymn-m": count(1.0, True),
        "dymn-l": count(2.0, True),
    }
    OUT.write_text(json.dumps(golden, indent=1))
    for k, v in golden.items():
        if isinstance(v, dict):
            print(k, v["macs"], v["params"], " ".join(f"{r:.3f}" for r in v["block_overhead_ratios"]))


if __name__ == "__main__":
    main()
