"""First-order versus zero-order latent optimization on a convex problem.

The zero-order path estimates gradients from paired cost evaluations along
random directions, so it never records a tape node.  It converges more
slowly than backpropagation but still beats doing nothing.
"""

from latentctl.diagnostics import bench_zo

print(f"{'mode':<5} {'median final cost':>18} {'tape nodes':>11} {'wall ms':>9}")
for row in bench_zo(seeds=range(20)):
    print(f"{row['mode']:<5} {row['final_cost']:18.4f} {row['tape_allocs']:11d} {row['wall_ms']:9.1f}")
