#pragma once

#include "calcurve/calib.hpp"
#include "calcurve/checkpoint.hpp"
#include "calcurve/csv.hpp"
#include "calcurve/curvature.hpp"
#include "calcurve/data.hpp"
#include "calcurve/harness.hpp"
#include "calcurve/loss.hpp"
#include "calcurve/margins.hpp"
#include "calcurve/net.hpp"
#include "calcurve/optim.hpp"
