// qcount.hpp: umbrella header.
#pragma once

#include "qcount/config.hpp"
#include "qcount/decay_fit.hpp"
#include "qcount/detection.hpp"
#include "qcount/dynamics.hpp"
#include "qcount/ensemble.hpp"
#include "qcount/error.hpp"
#include "qcount/jumps.hpp"
#include "qcount/lsq.hpp"
#include "qcount/photstat.hpp"
#include "qcount/pipeline.hpp"
#include "qcount/resolver.hpp"
#include "qcount/rng.hpp"
#include "qcount/stream.hpp"
