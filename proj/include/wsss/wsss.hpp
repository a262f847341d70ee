#pragma once

#include "wsss/bench.hpp"
#include "wsss/cam.hpp"
#include "wsss/checkpoint.hpp"
#include "wsss/crf.hpp"
#include "wsss/dataset.hpp"
#include "wsss/knowledge_transfer.hpp"
#include "wsss/metrics.hpp"
#include "wsss/pipeline.hpp"
#include "wsss/postproc.hpp"
#include "wsss/random_walk.hpp"
#include "wsss/synthetic.hpp"
#include "wsss/trainer.hpp"
