"""Regenerate the WADA-SNR lookup table shipped in cgadapt/dsp/data/.

Clean speech amplitudes are modelled as Gamma(shape=0.4) with random sign,
noise as zero-mean Gaussian.  For each SNR on a 1 dB grid from -20 to 100 dB
the statistic log(E|y|) - E[log|y|] of the mixture y is estimated with
common random numbers, so the resulting curve is smooth in SNR.

    python scripts/make_wada_table.py [n_samples]
"""
import sys
from pathlib import Path

import numpy as np

ALPHA = 0.4
OUT = Path(__file__).resolve().parents[1] / "src" / "cgadapt" / "dsp" / "data" / "wada_table.txt"


def main(n: int = 20_000_000, chunk: int = 2_000_000) -> None:
    snrs = np.arange(-20, 101, 1.0)
    sig_power = ALPHA * (ALPHA + 1.0)  # E[s^2] for Gamma(alpha, 1)
    sum_abs = np.zeros_like(snrs)
    sum_log = np.zeros_like(snrs)
    rng = np.random.default_rng(20080922)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        s = rng.gamma(ALPHA, 1.0, m) * rng.choice([-1.0, 1.0], m)
        z = rng.standard_normal(m)
        for i, snr in enumerate(snrs):
            sigma = np.sqrt(sig_power / 10 ** (snr / 10))
            a = np.abs(s + sigma * z)
            sum_abs[i] += a.sum()
            sum_log[i] += np.log(np.maximum(a, 1e-300)).sum()
        done += m
    g = np.log(sum_abs / n) - sum_log / n
    g = np.maximum.accumulate(g)
    lines = [
        "# WADA-SNR lookup: snr_db  statistic log(E|y|) - E[log|y|]",
        f"# gamma(shape={ALPHA}) speech + gaussian noise, {n} common-random-number samples",
    ]
    lines += [f"{snr:.1f}\t{v:.8f}" for snr, v in zip(snrs, g)]
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {OUT} ({len(snrs)} rows), range {g[0]:.5f} .. {g[-1]:.5f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20_000_000)
