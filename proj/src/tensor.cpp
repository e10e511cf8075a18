#include "mvreg/tensor.hpp"

namespace mvreg {

// splitmix64 mix of (parent, index); stable across platforms.
uint64_t derive_seed(uint64_t parent, uint64_t index) {
    uint64_t z = parent + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace mvreg
