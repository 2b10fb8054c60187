import sys

from layer_rsa.cli import main

if __name__ == "__main__":
    sys.exit(main())
