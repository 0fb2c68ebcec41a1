#pragma once

#include "tinyvlm/synthetic.hpp"

namespace tinyvlm::fixtures {

using synthetic::blend;
using synthetic::smooth_image;
using ZeroShotFixture = synthetic::ZeroShotSetup;

}  // namespace tinyvlm::fixtures
