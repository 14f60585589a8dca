"""Independent oracle for temperature sampling probabilities.

Evaluates q_i = p_i**a / sum_j p_j**a with 50-digit mpmath arithmetic, sharing
no code with the package, and prints the values that the tests pin.
"""

import mpmath

mpmath.mp.dps = 50

SIZES_K = ["393", "105", "67.3", "11.5", "14", "50", "53", "200", "20", "200", "88"]
ALPHAS = ["0", "0.4", "0.6", "1"]


def golden(alpha: str) -> list:
    sizes = [mpmath.mpf(s) * 1000 for s in SIZES_K]
    total = mpmath.fsum(sizes)
    weights = [(s / total) ** mpmath.mpf(alpha) for s in sizes]
    norm = mpmath.fsum(weights)
    return [w / norm for w in weights]


if __name__ == "__main__":
    for a in ALPHAS:
        print(f"{a}: [" + ", ".join(mpmath.nstr(q, 17, min_fixed=-1, max_fixed=1) for q in golden(a)) + "],")
