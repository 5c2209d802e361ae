"""Cross-validation folds and the summary report, driven through the CLI."""

import tempfile
from pathlib import Path

from dermseg.cli import main

with tempfile.TemporaryDirectory() as tmp:
    data, out = Path(tmp) / "data", Path(tmp) / "report"
    main(["synth", "--out", str(data), "--count", "20", "--seed", "1", "--hairs", "4"])
    # a tiny U-Net keeps this demo quick; real runs use the defaults
    main(["--set", "unet.depth=1", "--set", "unet.base_features=2", "--set", "color.target=64",
          "eval", "--data", str(data), "--methods", "cluster,unet-a,unet-b",
          "--folds", "5", "--iterations", "30", "--out", str(out)])
    print((out / "folds.txt").read_text())
    # 30 iterations leave the U-Net columns near chance; the clustering column is not trained
    print((out / "report.txt").read_text())
