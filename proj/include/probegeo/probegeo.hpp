#pragma once

#include "probegeo/error.hpp"
#include "probegeo/rng.hpp"
#include "probegeo/dataset.hpp"
#include "probegeo/synthgen.hpp"
#include "probegeo/metrics.hpp"
#include "probegeo/optim.hpp"
#include "probegeo/probe.hpp"
#include "probegeo/transfer.hpp"
#include "probegeo/geometry.hpp"
#include "probegeo/moe.hpp"
#include "probegeo/conformal.hpp"
#include "probegeo/report.hpp"
#include "probegeo/pipeline.hpp"
