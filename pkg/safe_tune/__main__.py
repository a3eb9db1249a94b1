import sys

from safe_tune import configure_blas_threads

configure_blas_threads()

from safe_tune.main import main  # noqa: E402

sys.exit(main())
