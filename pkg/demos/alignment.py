"""Show that flow composition pulls the source embedding distribution onto the target's.

A sphere is matched to a bumpy copy of itself.  Divergences are measured
in the target's standardized coordinates before and after composition.

Run: python demos/alignment.py [seed]
"""
import sys
import warnings

from flowcorr.harness import DESK_CONFIG, make_noniso_pair, run_pair


def main(seed=0):
    pair = make_noniso_pair(2000, bump_amplitude=0.25, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = run_pair(pair, ["fuse", "knn"], DESK_CONFIG)
    fuse, knn = results["fuse"][1], results["knn"][1]
    print(f"{'':<10}{'before':>10}{'after':>10}")
    print(f"{'kNN KL':<10}{fuse.kl_before:>10.4f}{fuse.kl_after:>10.4f}")
    print(f"{'hist JS':<10}{fuse.js_before:>10.4f}{fuse.js_after:>10.4f}")
    print(f"\ncoverage: fuse {fuse.coverage:.3f}, knn {knn.coverage:.3f}")
    print(f"geodesic error: fuse {fuse.geodesic_error:.4f}, knn {knn.geodesic_error:.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
