import os
import sys

sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from reprogram_lab.app import main  # noqa: E402


if __name__ == "__main__":
    if len(sys.argv) == 1:
        print("准备运行 Reprogram Lab 自检...")
        sys.argv.append("selftest")
    sys.exit(main())
