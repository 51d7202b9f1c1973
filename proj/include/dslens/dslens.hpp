#pragma once

// Everything except PNG support (dslens/png_io.hpp, which needs libpng).

#include "dslens/binary_io.hpp"
#include "dslens/decoder.hpp"
#include "dslens/error.hpp"
#include "dslens/evaluation.hpp"
#include "dslens/experiment.hpp"
#include "dslens/fixtures.hpp"
#include "dslens/image.hpp"
#include "dslens/intervention.hpp"
#include "dslens/kv_text.hpp"
#include "dslens/lenses.hpp"
#include "dslens/model.hpp"
#include "dslens/tensor.hpp"
#include "dslens/weights_io.hpp"
