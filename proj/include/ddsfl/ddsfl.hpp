#pragma once

// Umbrella include for the DDSFL toolkit.

#include "ddsfl/core.hpp"
#include "ddsfl/mathkit.hpp"
#include "ddsfl/dataio.hpp"
#include "ddsfl/svm.hpp"
#include "ddsfl/kdtree.hpp"
#include "ddsfl/exemplar.hpp"
#include "ddsfl/dsfl.hpp"
#include "ddsfl/deepstack.hpp"
#include "ddsfl/encode.hpp"
#include "ddsfl/config.hpp"
#include "ddsfl/pipeline.hpp"
#include "ddsfl/stages.hpp"
