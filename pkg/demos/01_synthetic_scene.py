"""Generate one synthetic smear, list its cells and write it to disk.

    python3 demos/01_synthetic_scene.py [out_dir]
"""

import sys
from pathlib import Path

from rbcscope.detector import ground_truth_boxes
from rbcscope.imgcore import write_pgm_mask, write_ppm
from rbcscope.synthgen import SceneSpec, generate_scene, patch_labelset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

scene = generate_scene(SceneSpec(rng_seed=7))
print(f"{len(scene.instances)} cells in {len(scene.groups)} groups")
for inst in scene.instances:
    b = inst.box
    print(f"  {inst.cell_type:17s} box=({b.x_min},{b.y_min})-({b.x_max},{b.y_max})")

# touching and overlapping cells merge into one mask region; each region is
# one patch whose labels are the types of the cells it covers
for box in ground_truth_boxes(scene.mask):
    print(f"  region {tuple(box)} -> {sorted(patch_labelset(scene, box))}")

write_ppm(out / "scene.ppm", scene.image)
write_pgm_mask(out / "scene_mask.pgm", scene.mask)
print(f"wrote {out / 'scene.ppm'} and {out / 'scene_mask.pgm'}")
