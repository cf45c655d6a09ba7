"""How the removal and admission masks grow with the epoch.

    python demos/masks_curriculum.py
"""
import numpy as np

from ssdas import alignment as al

rng = np.random.default_rng(0)
cds = rng.random(8).round(2)      # cross-domain similarity of 8 source puzzles
ent = rng.random(8).round(2) * 4  # entropy of 8 unlabeled target puzzles
max_epoch = 8
print("cds    ", cds.tolist())
print("entropy", ent.tolist())
print("epoch  removed  admitted  M_rm              M_add")
for epoch in range(max_epoch + 1):
    prog = al.EpochProgress(epoch, max_epoch)
    m_rm, m_add = al.compute_m_rm(cds, prog), al.compute_m_add(ent, prog)
    print(f"{epoch:5d}  {int((m_rm == 0).sum()):7d}  {int(m_add.sum()):8d}  "
          f"{''.join(str(int(v)) for v in m_rm):16s}  {''.join(str(int(v)) for v in m_add)}")
