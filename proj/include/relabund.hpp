#pragma once

#include "relabund/errors.hpp"
#include "relabund/survey.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/diagnostics.hpp"
#include "relabund/inference.hpp"
#include "relabund/simulator.hpp"
#include "relabund/validation.hpp"
#include "relabund/detectability.hpp"
#include "relabund/io.hpp"
#include "relabund/version.hpp"
