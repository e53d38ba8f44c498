#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace hrgsdp {

using Rng = std::mt19937_64;

// Independent stream for a (seed, key...) tuple. Streams never depend on thread
// count or scheduling, only on the key path.
Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> key);

// 64-bit FNV-1a, used for stable keys and config hashes.
std::uint64_t fnv1a(std::string_view s);

// Uniform on the open interval (0, 1).
double uniform_open(Rng& rng);
double std_normal(Rng& rng);
// Gamma parameterized by shape and rate (mean shape / rate).
double gamma_rate(Rng& rng, double shape, double rate);
double beta_draw(Rng& rng, double a, double b);
// Inverse-gamma IG(shape, scale) with density proportional to x^{-shape-1} exp(-scale/x).
double inv_gamma(Rng& rng, double shape, double scale);

}  // namespace hrgsdp
