"""Train with the pipelined orchestrator and with the federated baseline.

With N dividing the batch size both produce the same model; the clock
columns show where the time went.

    python demos/train_compare.py
"""

from pipelearn import nn
from pipelearn.orchestrator import TrainingConfig, run_fl_reference, run_training

cfg = TrainingConfig(widths=[4, 16, 2], activations=["relu", "softmax"], devices=2,
                     samples_per_device=500, batch_size=50, epochs=5, params=[1, 5])

pl = run_training(cfg)
fl = run_fl_reference(cfg)

print("epoch  pipelined loss / acc      federated loss / acc")
for a, b in zip(pl.trace, fl.trace):
    print(f"{a.epoch:5d}  {a.val_loss:.6f} / {a.val_accuracy:.3f}     {b.val_loss:.6f} / {b.val_accuracy:.3f}")
print(f"\nmax parameter difference: {nn.max_abs_diff(pl.model, fl.model):.2e}")

for name, res in (("pipelined", pl), ("federated", fl)):
    m = res.metrics[-1]
    print(f"{name:10s} epoch {m.epoch_makespan:8.4f} s  server idle {m.server_idle:8.4f} s"
          f"  sent {m.transmitted_mb:7.3f} Mb")

seq = run_training(TrainingConfig(**{**cfg.to_dict(), "mode": "pipelearn-seq"}))
print(f"sequential server: epoch {seq.metrics[-1].epoch_makespan:8.4f} s, "
      f"same model: {nn.max_abs_diff(seq.model, pl.model) < 1e-9}")
