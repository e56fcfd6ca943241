import sys

from homokin.cli import main

sys.exit(main())
