"""Regenerate the golden checkpoint fixture in tests/data.

A small scale-4 model is trained for a few steps on the synthetic texture
so every tensor is non-trivial, then saved alongside an input image and the
SHA-256 of the uint8 pixels that inference produces from it.
"""
import hashlib
import json
from pathlib import Path

from hpinet.config import HpiConfig
from hpinet.imaging import ImagePlane, read_png, to_uint8, write_png
from hpinet.model import forward, load_checkpoint, params_digest, save_checkpoint
from hpinet.synthetic import textured_image
from hpinet.training import Batch, TrainState, degrade, train_step

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"
CFG = HpiConfig(scale=4, blocks=2, patch_sizes=(4, 6), channels=8, seed=2024)


def output_hash(ckpt: Path, image: Path) -> str:
    cfg, params = load_checkpoint(ckpt)
    out = forward(read_png(image), params, cfg)
    return hashlib.sha256(to_uint8(out).tobytes()).hexdigest()


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    hr = textured_image(48, seed=1)
    state = TrainState.fresh(CFG)
    batch = Batch([degrade(hr, 4)], [hr], [0])
    for _ in range(20):
        train_step(state, batch, 1e-3)
    ckpt, image = DATA / "golden.hpin", DATA / "golden_input.png"
    save_checkpoint(ckpt, CFG, state.params)
    write_png(image, ImagePlane(textured_image(20, seed=2)[:, :, :17]))
    record = {
        "checkpoint": ckpt.name,
        "input": image.name,
        "output_dims": [3, 80, 68],
        "params_sha256": params_digest(load_checkpoint(ckpt)[1]),
        "output_uint8_sha256": output_hash(ckpt, image),
    }
    (DATA / "golden.json").write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record, indent=2))


if __name__ == "__main__":
    main()
