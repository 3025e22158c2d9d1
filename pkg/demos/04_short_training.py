"""A short training run on small phantoms, then evaluation and a checkpoint round trip.

The full acceptance run (base 8, 32x32x16, 500 steps) takes about ten minutes
on one core; this one is scaled down to finish in under a minute.
"""
import os
import tempfile

from vseg.losses import metrics_table
from vseg.network import NetConfig, load_checkpoint
from vseg.phantom import PhantomSpec, generate_phantom
from vseg.train import TrainConfig, evaluate, train

spec = PhantomSpec(shape=(8, 16, 16), lesion_radius=(1.5, 3.0))
data = [generate_phantom(spec, seed=s) for s in range(4)]
for i, d in enumerate(data):
    d.case_id = f"case_{i}"

cfg = TrainConfig(net=NetConfig(base_channels=4), steps=120, batch_size=2, patch=(8, 16, 16), lr0=1e-3)
out = tempfile.mkdtemp()
res = train(cfg, data, out_dir=out, progress=lambda row: print(row) if row.startswith(("1\t", "60\t", "120\t")) else None)

records, means = evaluate(res.net, data)
print(metrics_table(records), end="")

net = load_checkpoint(res.checkpoints[-1])
_, again = evaluate(net, data)
print("checkpoint reproduces metrics:", again == means, "|", os.path.basename(res.checkpoints[-1]))
