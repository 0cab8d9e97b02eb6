import sys

from gbdal.cli import main

sys.exit(main())
