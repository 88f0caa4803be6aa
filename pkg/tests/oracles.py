"""Independent reference computations used by the unit and acceptance suites."""

import math
import re

# (attack, defense, acc0, asr0, acc1, asr1, printed DER) in percent, transcribed
# from the CIFAR-10 / PreAct-ResNet18 results table (10% poisoning)
DER_ROWS = [
    ("BadNets-A2O", "FP", 91.82, 93.79, 91.77, 0.84, 96.45),
    ("BadNets-A2O", "NAD", 91.82, 93.79, 88.82, 1.96, 94.42),
    ("BadNets-A2O", "NC", 91.82, 93.79, 90.33, 2.01, 95.14),
    ("BadNets-A2O", "ANP", 91.82, 93.79, 92.17, 39.14, 77.32),
    ("BadNets-A2O", "i-BAU", 91.82, 93.79, 87.43, 4.48, 92.46),
    ("BadNets-A2O", "EP", 91.82, 93.79, 89.8, 1.26, 95.26),
    ("BadNets-A2O", "NPD", 91.82, 93.79, 88.93, 1.26, 94.82),
    ("BadNets-A2O", "r-CNPD", 91.82, 93.79, 89.73, 0.88, 95.41),
    ("BadNets-A2O", "e-CNPD", 91.82, 93.79, 89.41, 0.96, 95.21),
    ("BadNets-A2O", "a-CNPD", 91.82, 93.79, 90.68, 0.46, 96.10),
    ("BadNets-A2A", "FP", 91.89, 74.42, 92.05, 1.31, 86.56),
    ("BadNets-A2A", "r-CNPD", 91.89, 74.42, 91.11, 2.23, 85.70),
    ("Blended", "FP", 93.69, 99.76, 92.74, 10.17, 94.32),
    ("Blended", "NC", 93.69, 99.76, 93.69, 99.76, 50.00),
    ("Blended", "ANP", 93.69, 99.76, 93.45, 47.14, 76.19),
    ("Blended", "a-CNPD", 93.69, 99.76, 92.46, 0.07, 99.23),
    ("WaNet", "FP", 92.8, 98.9, 92.94, 0.66, 99.12),
    ("Adap-Blend", "a-CNPD", 92.34, 74.28, 90.30, 1.31, 85.46),
]

_CELL = re.compile(r"\\cellcolor\[HTML\]\{\w+\}")
_HEAD = re.compile(r"multicolumn\{3\}\{c\|?\}\{([^}\\(]*)")


def parse_results_table(text, label="table1"):
    """All ``(attack, defense, acc0, asr0, acc1, asr1, der)`` rows of a LaTeX results table."""
    lines = text.splitlines()
    start = next(i for i, ln in enumerate(lines) if "\\label{%s}" % label in ln)
    end = next(i for i in range(start, len(lines)) if "end{tabular}" in lines[i])
    base, out, defs = {}, [], []
    for ln in lines[start:end]:
        if ln.startswith("Defense"):
            defs = [d.strip() for d in _HEAD.findall(ln)]
            continue
        if "&" not in ln or ln.startswith("Attack"):
            continue
        cells = ln.split("&")
        attack = re.sub(r"\\cite\{[^}]*\}", "", cells[0]).strip()
        nums = [_CELL.sub("", c).replace("$", "").replace("\\midrule", "")
                .replace("\\\\", "").strip() for c in cells[1:]]
        first = 0
        if defs[0] == "No Defense":
            base[attack] = (float(nums[0]), float(nums[1]))
            first = 1
        if attack == "Average":
            continue
        for k in range(first, len(defs)):
            acc, asr, der = (float(v) for v in nums[3 * k:3 * k + 3])
            out.append((attack, defs[k], *base[attack], acc, asr, der))
    return out


def _dist(dx, dy, grid, p):
    a, b = abs(dx) / (grid - 1), abs(dy) / (grid - 1)
    if p == math.inf:
        return max(a, b)
    return (a ** p + b ** p) ** (1.0 / p)


def enumerate_risks(inst, h):
    """``(r_bd, r_cnpd)`` by explicit loops over points, classes and lattice targets."""
    g = inst.grid
    points = [(i, j) for i in range(g) for j in range(g)
              if inst.domain[i, j] and inst.labels[i, j] != inst.target]
    bd = cn = 0
    for i, j in points:
        ti, tj = inst.trigger[i, j]
        y = inst.labels[i, j]
        if h[ti, tj] == inst.target:
            bd += 1
        hit = 0
        for t in range(inst.num_classes):
            if t == y or inst.h_bd[ti, tj] != t:
                continue
            for zi in range(g):
                for zj in range(g):
                    if h[zi, zj] == t and \
                            _dist(zi - i, zj - j, g, inst.p) <= inst.rho * (1 + 1e-12):
                        hit = 1
                        break
                if hit:
                    break
        cn += hit
    return bd / len(points), cn / len(points)


def reference_table_path():
    """Markdown source of the results table, if present next to the repo."""
    import os
    here = os.path.dirname(os.path.abspath(__file__))
    path = os.environ.get("POLARLAB_REFERENCE_MD", os.path.join(here, "..", "paper.md"))
    return path if os.path.exists(path) else None
