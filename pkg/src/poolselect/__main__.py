import poolselect
import sys

sys.exit(poolselect.main())
