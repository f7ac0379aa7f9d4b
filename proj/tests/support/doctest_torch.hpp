#pragma once

// c10 ships glog-style CHECK macros; pull torch in first so doctest's definitions win.
#include <torch/torch.h>
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE
#undef CHECK_NOTNULL

#include "doctest.h"
