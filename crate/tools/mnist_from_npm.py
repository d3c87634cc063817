"""Rebuild the bundled MNIST IDX files from the `mnist` npm package (v1.1.0).

That package ships 10,000 MNIST digits as 784-float arrays quantized to three
decimals. Pixels are mapped back to bytes with round(v * 255). Every tenth
digit (in digit-major order) goes to the test split, the rest to train.

usage: npm pack mnist && tar xzf mnist-1.1.0.tgz
       python3 tools/mnist_from_npm.py package/dist/mnist.js data/mnist
"""
import gzip
import re
import struct
import sys


def main(src, out):
    text = open(src).read()
    digits = {}
    for m in re.finditer(r'(\d+):\[function\(require,module,exports\)\{\s*module\.exports=\{ "data": \[([^\]]*)\]', text):
        digits[int(m.group(1)) - 1] = [float(v) for v in m.group(2).split(",")]
    assert sorted(digits) == list(range(10)), sorted(digits)

    splits = {"train": ([], []), "t10k": ([], [])}
    k = 0
    for label in range(10):
        vals = digits[label]
        assert len(vals) % 784 == 0
        for i in range(len(vals) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in vals[i * 784:(i + 1) * 784])
            imgs, labs = splits["t10k" if k % 10 == 9 else "train"]
            imgs.append(px)
            labs.append(label)
            k += 1

    for name, (imgs, labs) in splits.items():
        with gzip.GzipFile(f"{out}/{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(imgs), 28, 28))
            f.write(b"".join(imgs))
        with gzip.GzipFile(f"{out}/{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(labs)))
            f.write(bytes(labs))
        print(name, len(imgs))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
