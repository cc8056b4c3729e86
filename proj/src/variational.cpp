#include "dwc/variational.hpp"

namespace dwc {

std::atomic<std::uint64_t>& negative_variance_count() {
    static std::atomic<std::uint64_t> count{0};
    return count;
}

} // namespace dwc
