"""Regenerate the committed fixture media. Deterministic, so reruns leave
the repository unchanged."""

from pathlib import Path

from PIL import Image

HERE = Path(__file__).parent
SIZE = 64


def frame(index: int) -> Image.Image:
    img = Image.new("RGB", (SIZE, SIZE))
    pixels = img.load()
    for x in range(SIZE):
        for y in range(SIZE):
            pixels[x, y] = (
                (index * 37 + x * 3) % 256,
                (index * 59 + y * 3) % 256,
                (index * 83 + x + y) % 256,
            )
    return img


def main() -> None:
    out = HERE / "media"
    out.mkdir(exist_ok=True)
    for i in range(1, 13):
        frame(i).save(out / f"s{i:02d}.png")
    print(f"wrote 12 frames to {out}")


if __name__ == "__main__":
    main()
