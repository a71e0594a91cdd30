#!/usr/bin/env python3
"""Regenerate the reference architecture files under archs/."""
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent / "archs"


def resnet20():
    out = ["# ResNet-20 for 32x32 RGB inputs, 10 classes.",
           "# 19 convs on the straight-through branch, 2 projection convs on skips.",
           "input input shape=3x32x32",
           "conv1 conv out=16 k=3",
           "bn1 bn",
           "relu1 activation fn=relu"]
    edges = [("input", "conv1"), ("conv1", "bn1"), ("bn1", "relu1")]
    prev, width = "relu1", 16
    for stage, w in enumerate((16, 32, 64), start=1):
        for block in range(3):
            p = f"s{stage}b{block}"
            stride = 2 if stage > 1 and block == 0 else 1
            out += [f"{p}_conv1 conv out={w} k=3 stride={stride}",
                    f"{p}_bn1 bn",
                    f"{p}_relu1 activation fn=relu",
                    f"{p}_conv2 conv out={w} k=3",
                    f"{p}_bn2 bn"]
            edges += [(prev, f"{p}_conv1"), (f"{p}_conv1", f"{p}_bn1"), (f"{p}_bn1", f"{p}_relu1"),
                      (f"{p}_relu1", f"{p}_conv2"), (f"{p}_conv2", f"{p}_bn2")]
            shortcut = prev
            if stride != 1 or w != width:
                out += [f"{p}_down conv out={w} k=1 stride={stride}", f"{p}_downbn bn"]
                edges += [(prev, f"{p}_down"), (f"{p}_down", f"{p}_downbn")]
                shortcut = f"{p}_downbn"
            out += [f"{p}_add add skip={shortcut}", f"{p}_relu2 activation fn=relu"]
            edges += [(f"{p}_bn2", f"{p}_add"), (shortcut, f"{p}_add"), (f"{p}_add", f"{p}_relu2")]
            prev, width = f"{p}_relu2", w
    out += ["pool pool type=gavg", "fc linear out=10", "output output"]
    edges += [(prev, "pool"), ("pool", "fc"), ("fc", "output")]
    return out, edges


def toy6(widths=(16, 32, 32, 64, 64, 64), strides=(1, 2, 1, 2, 1, 1), name="6-conv", size=32, classes=10):
    out = [f"# {name} toy CNN for {size}x{size} RGB inputs, {classes} classes.", f"input input shape=3x{size}x{size}"]
    edges = []
    prev = "input"
    for i, (w, s) in enumerate(zip(widths, strides), start=1):
        out += [f"conv{i} conv out={w} k=3 stride={s}", f"bn{i} bn", f"relu{i} activation fn=relu"]
        edges += [(prev, f"conv{i}"), (f"conv{i}", f"bn{i}"), (f"bn{i}", f"relu{i}")]
        prev = f"relu{i}"
    out += ["pool pool type=gavg", f"fc linear out={classes}", "output output"]
    edges += [(prev, "pool"), ("pool", "fc"), ("fc", "output")]
    return out, edges


def write(name, body):
    nodes, edges = body
    text = "\n".join(nodes + [""] + [f"edge {a} {b}" for a, b in edges]) + "\n"
    (ROOT / name).write_text(text)
    print(f"wrote {ROOT / name}", file=sys.stderr)


if __name__ == "__main__":
    ROOT.mkdir(exist_ok=True)
    write("resnet20.arch", resnet20())
    write("toy6.arch", toy6())
    # CPU-sized variant used by the desk recipe
    write("toy6_half.arch", toy6((8, 16, 16, 32, 32, 32), name="half-width 6-conv"))
    # unit-test sized: 3 convs on 8x8 inputs
    write("tiny3.arch", toy6((4, 8, 8), (1, 2, 1), name="3-conv", size=8, classes=2))
