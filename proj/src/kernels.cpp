#include "neti/kernels.hpp"

namespace neti::kernels {

bool& parallel_flag() {
    static bool on = true;
    return on;
}

} // namespace neti::kernels
