import sys

from noisy_quant.cli import main

if __name__ == "__main__":
    sys.exit(main())
