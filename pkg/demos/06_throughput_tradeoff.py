"""Walkthrough: the accuracy/throughput trade-off of token pruning.

Sweeps the retained-token count k over a 1000-item workload and prints the
items/second, accuracy, and analytic op count per configuration, with the
full-token pipeline as the reference.
"""

from spotlighter import RunConfig, bench_throughput, generate_base_novel, train

cfg = RunConfig(epochs=5)
base_train, _, _ = generate_base_novel(cfg.synth_spec(), cfg.shots, cfg.test_per_class)
state = train(cfg, base_train)

report = bench_throughput(state, n_items=1000, k_list=[2, 4, 8, 16, 24, 32], reps=5)
full = report.full_row

print(f"workload: {report.n_items} items, median of {report.reps} repetitions")
print(f"trainable parameters: {report.trainable_param_count}\n")
print(f"{'k':>4} {'items/s':>10} {'vs full':>8} {'accuracy':>9} {'Mops/item':>10}")
for row in report.rows:
    print(f"{row.k:>4} {row.items_per_sec:>10.0f} {row.items_per_sec / full.items_per_sec:>7.2f}x "
          f"{row.accuracy:>9.2f} {row.flops / 1e6:>10.2f}")
print(f"{'full':>4} {full.items_per_sec:>10.0f} {'1.00x':>8} "
      f"{full.accuracy:>9.2f} {full.flops / 1e6:>10.2f}")
