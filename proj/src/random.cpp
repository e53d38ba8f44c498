#include "random.hpp"

#include <vector>

namespace hrgsdp {

Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * key.size());
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (std::uint64_t k : key) {
        words.push_back(static_cast<std::uint32_t>(k));
        words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

double uniform_open(Rng& rng) {
    // 53 random bits, shifted off zero.
    constexpr double scale = 1.0 / 9007199254740992.0;
    return (static_cast<double>(rng() >> 11) + 0.5) * scale;
}

double std_normal(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

double gamma_rate(Rng& rng, double shape, double rate) {
    std::gamma_distribution<double> dist(shape, 1.0 / rate);
    return dist(rng);
}

double beta_draw(Rng& rng, double a, double b) {
    const double x = gamma_rate(rng, a, 1.0);
    const double y = gamma_rate(rng, b, 1.0);
    return x / (x + y);
}

double inv_gamma(Rng& rng, double shape, double scale) {
    return 1.0 / gamma_rate(rng, shape, scale);
}

}  // namespace hrgsdp
