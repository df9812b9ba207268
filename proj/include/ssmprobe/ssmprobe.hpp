#pragma once

#include "ssmprobe/analysis.hpp"
#include "ssmprobe/binary_io.hpp"
#include "ssmprobe/checkpoint.hpp"
#include "ssmprobe/config.hpp"
#include "ssmprobe/core.hpp"
#include "ssmprobe/diagnostics.hpp"
#include "ssmprobe/feature_store.hpp"
#include "ssmprobe/heads.hpp"
#include "ssmprobe/optim.hpp"
#include "ssmprobe/pooling.hpp"
#include "ssmprobe/routing.hpp"
#include "ssmprobe/scan_orders.hpp"
#include "ssmprobe/ssm.hpp"
#include "ssmprobe/trainer.hpp"
