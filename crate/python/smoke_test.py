"""Smoke test for the Python bindings.

Build and install first:  maturin develop -m crates/py/Cargo.toml
"""

import math
import tempfile
from pathlib import Path

import nastykd


def main():
    p = nastykd.softmax([[2.0, 0.0]], tau=2.0)
    assert abs(p[0][0] - 0.7311) < 1e-4

    student = [[0.5, -1.2, 2.0], [1.0, 0.3, -0.7]]
    teacher = [[1.5, 0.2, -0.3], [-0.4, 2.2, 0.9]]
    labels = [2, 1]
    assert nastykd.kd_loss(teacher, teacher, labels, alpha=1.0, tau_s=3.0) < 1e-12
    assert nastykd.kd_loss(student, teacher, labels) > 0.0
    base = nastykd.nasty_loss(teacher, student, labels, omega=0.0)
    assert nastykd.nasty_loss(teacher, student, labels, omega=0.04) < base
    assert nastykd.multi_peak([[1.0, 0.0, 0.0]], 0.1) == 1.0

    try:
        nastykd.kd_loss(student, teacher, labels, alpha=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha outside [0, 1] accepted")

    test = nastykd.Dataset.digits("test")
    assert len(test) == 359 and test.num_classes == 10
    model = nastykd.Model("tiny_cnn", test.sample_shape, test.num_classes, seed=3)
    logits = model.predict(test)
    assert len(logits) == len(test) and all(math.isfinite(v) for v in logits[0])
    acc = model.accuracy(test)
    assert 0.0 <= acc <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        model.save(str(path))
        again = nastykd.Model.load(str(path))
        assert again.checksum() == model.checksum()
        assert again.predict(test)[0] == logits[0]

    print(f"ok: {model.kind} with {model.parameter_count} parameters, untrained accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
