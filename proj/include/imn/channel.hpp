#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "imn/rng.hpp"

namespace imn {

using cplx = std::complex<double>;

// One received baseband sequence (also used for symbols, fading gains, noise).
using ComplexSequence = std::vector<cplx>;

enum class NoiseState : std::uint8_t { Good = 0, Bad = 1 };

using StateSequence = std::vector<NoiseState>;

enum class FadingKind { Complex, Real };
enum class SourceKind { Qpsk, Gaussian };
enum class SnrReference { Background, Total };

// Ground-truth impulsive-noise parameters. R is linear (not dB), gamma is the
// channel memory, sigma_w2 the background Gaussian noise variance.
struct NoiseSpec {
    double p = 0.1;
    double r = 100.0;
    double gamma = 10.0;
    double sigma_w2 = 1.0;

    double sigma_v2() const { return r * sigma_w2; }

    void validate() const {
        if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("NoiseSpec: p must lie in [0,1], got " + std::to_string(p));
        if (!(r > 0.0)) throw std::domain_error("NoiseSpec: R must be > 0, got " + std::to_string(r));
        if (!(gamma > 0.0)) throw std::domain_error("NoiseSpec: gamma must be > 0, got " + std::to_string(gamma));
        if (!(sigma_w2 > 0.0)) throw std::domain_error("NoiseSpec: sigma_w2 must be > 0, got " + std::to_string(sigma_w2));
        if (p / gamma > 1.0)
            throw std::domain_error("NoiseSpec: infeasible chain, p/gamma = " + std::to_string(p / gamma) + " > 1");
        if ((1.0 - p) / gamma > 1.0)
            throw std::domain_error("NoiseSpec: infeasible chain, (1-p)/gamma = " +
                                    std::to_string((1.0 - p) / gamma) + " > 1");
    }
};

// First-order chain over {Good, Bad}.
struct TransitionModel {
    double p_gb = 0.0; // Good -> Bad
    double p_bg = 0.0; // Bad  -> Good
};

// Unique transition probabilities with stationary bad-state mass p and
// memory gamma = 1/(p_gb + p_bg).
inline TransitionModel derive_transitions(const NoiseSpec& spec) {
    spec.validate();
    return {spec.p / spec.gamma, (1.0 - spec.p) / spec.gamma};
}

// Long-run occupancy (p_good, p_bad).
inline std::pair<double, double> stationary_distribution(const TransitionModel& tm) {
    const double total = tm.p_gb + tm.p_bg;
    if (!(total > 0.0)) throw std::domain_error("stationary_distribution: p_gb + p_bg must be > 0");
    return {tm.p_bg / total, tm.p_gb / total};
}

// Initial state from the stationary distribution, then Markov transitions.
inline StateSequence sample_state_chain(const TransitionModel& tm, std::size_t length, std::uint64_t seed) {
    if (length < 1) throw std::domain_error("sample_state_chain: length must be >= 1");
    const auto [p_good, p_bad] = stationary_distribution(tm);
    (void)p_good;
    Xoshiro256 rng(seed);
    StateSequence states(length);
    states[0] = rng.uniform() <= p_bad ? NoiseState::Bad : NoiseState::Good;
    for (std::size_t i = 1; i < length; ++i) {
        const bool was_bad = states[i - 1] == NoiseState::Bad;
        const double flip = was_bad ? tm.p_bg : tm.p_gb;
        const bool switch_state = rng.uniform() <= flip;
        states[i] = (was_bad != switch_state) ? NoiseState::Bad : NoiseState::Good;
    }
    return states;
}

// Circularly symmetric complex Gaussian noise; total variance sigma_w2 in the
// good state and R*sigma_w2 in the bad state, split equally over I/Q.
inline ComplexSequence sample_noise(const StateSequence& states, const NoiseSpec& spec, std::uint64_t seed) {
    if (states.empty()) throw std::domain_error("sample_noise: state sequence is empty");
    Xoshiro256 rng(seed);
    const double good_scale = std::sqrt(spec.sigma_w2 / 2.0);
    const double bad_scale = std::sqrt(spec.sigma_v2() / 2.0);
    ComplexSequence noise(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        const double scale = states[i] == NoiseState::Bad ? bad_scale : good_scale;
        const auto [re, im] = rng.normal_pair();
        noise[i] = {re * scale, im * scale};
    }
    return noise;
}

// Unit-energy QPSK symbols, uniform over {(+-1 +- j)/sqrt(2)}.
inline ComplexSequence modulate_qpsk(std::size_t length, std::uint64_t seed) {
    if (length < 1) throw std::domain_error("modulate_qpsk: length must be >= 1");
    Xoshiro256 rng(seed);
    constexpr double amp = 0.7071067811865476; // 1/sqrt(2)
    ComplexSequence symbols(length);
    for (auto& symbol : symbols) {
        const std::uint64_t bits = rng.next();
        symbol = {(bits & 1) ? amp : -amp, (bits & 2) ? amp : -amp};
    }
    return symbols;
}

// Zero-mean complex Gaussian symbols with unit energy, for the alternative
// source model.
inline ComplexSequence modulate_gaussian(std::size_t length, std::uint64_t seed) {
    if (length < 1) throw std::domain_error("modulate_gaussian: length must be >= 1");
    Xoshiro256 rng(seed);
    constexpr double amp = 0.7071067811865476;
    ComplexSequence symbols(length);
    for (auto& symbol : symbols) {
        const auto [re, im] = rng.normal_pair();
        symbol = {re * amp, im * amp};
    }
    return symbols;
}

// i.i.d. CN(0,1) channel gains (Rayleigh envelope). The Real variant keeps a
// real N(0,1) gain instead.
inline ComplexSequence sample_fading(std::size_t length, std::uint64_t seed, FadingKind kind = FadingKind::Complex) {
    if (length < 1) throw std::domain_error("sample_fading: length must be >= 1");
    Xoshiro256 rng(seed);
    constexpr double amp = 0.7071067811865476;
    ComplexSequence gains(length);
    if (kind == FadingKind::Complex) {
        for (auto& g : gains) {
            const auto [re, im] = rng.normal_pair();
            g = {re * amp, im * amp};
        }
    } else {
        for (auto& g : gains) {
            g = {rng.normal_pair().first, 0.0};
        }
    }
    return gains;
}

// Background-noise variance for a given SNR, referenced to sigma_w2.
inline double snr_to_noise_variance(double snr_db, double symbol_energy) {
    if (!(symbol_energy > 0.0)) throw std::domain_error("snr_to_noise_variance: symbol energy must be > 0");
    return symbol_energy / std::pow(10.0, snr_db / 10.0);
}

struct ChannelOptions {
    FadingKind fading = FadingKind::Complex;
    SourceKind source = SourceKind::Qpsk;
};

// y_i = h_i * x_i + n_i. Sub-seeds are derived per component so the four
// random streams are independent and reproducible.
inline std::pair<ComplexSequence, StateSequence> received_sequence(const NoiseSpec& spec, std::size_t length,
                                                                   std::uint64_t seed,
                                                                   const ChannelOptions& opts = {}) {
    const TransitionModel tm = derive_transitions(spec);
    const ComplexSequence symbols = opts.source == SourceKind::Qpsk
                                        ? modulate_qpsk(length, mix_seed(seed, 1))
                                        : modulate_gaussian(length, mix_seed(seed, 1));
    const ComplexSequence gains = sample_fading(length, mix_seed(seed, 2), opts.fading);
    StateSequence states = sample_state_chain(tm, length, mix_seed(seed, 3));
    const ComplexSequence noise = sample_noise(states, spec, mix_seed(seed, 4));
    ComplexSequence received(length);
    for (std::size_t i = 0; i < length; ++i) received[i] = gains[i] * symbols[i] + noise[i];
    return {std::move(received), std::move(states)};
}

} // namespace imn
