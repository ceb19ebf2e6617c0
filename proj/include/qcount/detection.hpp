// detection.hpp: Hanbury Brown-Twiss detector chain, TRPL decay histograms and
// two-detector coincidence histograms.
#pragma once

#include "qcount/error.hpp"
#include "qcount/rng.hpp"
#include "qcount/stream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace qcount {

struct DetectorConfig {
    double efficiency = 1.0;
    double dead_time_ns = 0.0;
    double jitter_sigma_ps = 0.0;
    double dark_rate_cps = 0.0;
    double splitter_ratio = 0.5;  // fraction routed to detector 0

    // Plumbing defaults for a silicon SPAD pair; not calibrated to any setup.
    static DetectorConfig realistic() { return {0.6, 50.0, 350.0, 100.0, 0.5}; }
};

inline void validate(const DetectorConfig& d) {
    require(d.efficiency >= 0.0 && d.efficiency <= 1.0, "invalid_detector", "efficiency must lie in [0, 1]");
    require(d.dead_time_ns >= 0.0, "invalid_detector", "dead_time_ns must be non-negative");
    require(d.jitter_sigma_ps >= 0.0, "invalid_detector", "jitter_sigma_ps must be non-negative");
    require(d.dark_rate_cps >= 0.0, "invalid_detector", "dark_rate_cps must be non-negative");
    require(d.splitter_ratio >= 0.0 && d.splitter_ratio <= 1.0, "invalid_detector", "splitter_ratio must lie in [0, 1]");
}

// Each photon is routed, kept with probability efficiency and jittered; dark
// counts are a Poisson process per detector; then a non-paralyzable dead time
// is applied per detector. Jittered delays are clamped into [0, period).
inline PhotonStream apply_detector_chain(const PhotonStream& s, const DetectorConfig& d, std::uint64_t seed) {
    validate(d);
    require(s.is_pre_detector(), "wrong_stage", "detector chain expects a pre-detector stream");
    const std::int64_t period = s.header.period_ps();
    struct Tagged {
        std::int64_t t;
        int det;
    };
    std::vector<Tagged> hits;
    hits.reserve(s.records.size());

    std::int64_t current_pulse = -1;
    Rng rng(0);
    std::normal_distribution<double> jitter(0.0, 1.0);
    for (const auto& r : s.records) {
        if (r.pulse_index != current_pulse) {
            current_pulse = r.pulse_index;
            rng = make_rng(seed, static_cast<std::uint64_t>(current_pulse), stream_tag::detection);
            jitter.reset();
        }
        const int det = uniform01(rng) < d.splitter_ratio ? 0 : 1;
        const bool kept = d.efficiency >= 1.0 || uniform01(rng) < d.efficiency;
        std::int64_t delay = r.delay_ps;
        if (d.jitter_sigma_ps > 0.0) {
            delay += static_cast<std::int64_t>(std::llround(d.jitter_sigma_ps * jitter(rng)));
            delay = std::clamp<std::int64_t>(delay, 0, period - 1);
        }
        if (kept) hits.push_back({r.pulse_index * period + delay, det});
    }

    if (d.dark_rate_cps > 0.0) {
        const double span_ps = static_cast<double>(s.header.n_pulses) * static_cast<double>(period);
        const double rate_per_ps = d.dark_rate_cps * 1e-12;
        for (int det = 0; det < 2; ++det) {
            auto drng = make_rng(seed, static_cast<std::uint64_t>(det), stream_tag::dark_counts);
            double t = 0.0;
            for (;;) {
                t += -std::log(uniform_open0(drng)) / rate_per_ps;
                if (t >= span_ps) break;
                hits.push_back({static_cast<std::int64_t>(t), det});
            }
        }
    }

    std::stable_sort(hits.begin(), hits.end(), [](const Tagged& a, const Tagged& b) { return a.t < b.t; });
    const auto dead = static_cast<std::int64_t>(std::llround(d.dead_time_ns * 1000.0));
    std::int64_t last[2] = {std::numeric_limits<std::int64_t>::min() / 2, std::numeric_limits<std::int64_t>::min() / 2};
    bool any[2] = {false, false};

    PhotonStream out;
    out.header = s.header;
    out.header.stage = "detected";
    out.records.reserve(hits.size());
    for (const auto& h : hits) {
        if (any[h.det] && h.t - last[h.det] < dead) continue;
        any[h.det] = true;
        last[h.det] = h.t;
        out.records.push_back({h.t / period, h.det, h.t % period});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decay (TRPL) histogram: delays of all photons, both detectors pooled.

struct DecayHistogram {
    std::int64_t bin_width_ps = 100;
    std::vector<std::uint64_t> counts;
    std::int64_t total_pulses = 0;

    double bin_start_ns(std::size_t i) const { return static_cast<double>(i) * static_cast<double>(bin_width_ps) * 1e-3; }
    double bin_center_ns(std::size_t i) const { return (static_cast<double>(i) + 0.5) * static_cast<double>(bin_width_ps) * 1e-3; }
    double bin_width_ns() const { return static_cast<double>(bin_width_ps) * 1e-3; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    DecayHistogram& operator+=(const DecayHistogram& o) {
        require(o.bin_width_ps == bin_width_ps && o.counts.size() == counts.size(), "histogram_mismatch",
                "cannot merge histograms with different binning");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        total_pulses += o.total_pulses;
        return *this;
    }
    friend bool operator==(const DecayHistogram&, const DecayHistogram&) = default;
};

inline DecayHistogram make_decay_histogram(std::int64_t period_ps, std::int64_t bin_width_ps, std::int64_t pulses = 0) {
    require(bin_width_ps >= 1, "invalid_bin_width", "bin width must be >= 1 ps");
    require(period_ps >= 1, "invalid_period", "period must be positive");
    DecayHistogram h;
    h.bin_width_ps = bin_width_ps;
    h.counts.assign(static_cast<std::size_t>((period_ps + bin_width_ps - 1) / bin_width_ps), 0);
    h.total_pulses = pulses;
    return h;
}

inline void accumulate(DecayHistogram& h, const PhotonRecord& r) {
    const auto bin = static_cast<std::size_t>(r.delay_ps / h.bin_width_ps);
    require(r.delay_ps >= 0 && bin < h.counts.size(), "bad_record", "delay outside histogram range");
    ++h.counts[bin];
}

// detector: -2 pools everything, otherwise only records from that detector.
inline DecayHistogram build_decay_histogram(const PhotonStream& s, std::int64_t bin_width_ps, int detector = -2) {
    auto h = make_decay_histogram(s.header.period_ps(), bin_width_ps, s.header.n_pulses);
    for (const auto& r : s.records)
        if (detector == -2 || r.detector == detector) accumulate(h, r);
    return h;
}

// Streams records straight from a CSV reader.
inline DecayHistogram build_decay_histogram(StreamCsvReader& reader, std::int64_t bin_width_ps) {
    auto h = make_decay_histogram(reader.header().period_ps(), bin_width_ps, reader.header().n_pulses);
    PhotonRecord r;
    while (reader.next(r)) accumulate(h, r);
    return h;
}

inline void write_histogram_csv(std::ostream& os, const DecayHistogram& h) {
    os << "# {\"bin_width_ps\":" << h.bin_width_ps << ",\"schema_version\":1,\"total_pulses\":" << h.total_pulses << "}\n";
    os << "bin_start_ps,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        os << static_cast<std::int64_t>(i) * h.bin_width_ps << ',' << h.counts[i] << '\n';
}

inline DecayHistogram read_histogram_csv(std::istream& is) {
    DecayHistogram h;
    h.bin_width_ps = 0;
    std::string line, meta;
    bool columns = false;
    std::vector<std::int64_t> starts;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            meta += line.substr(1);
            continue;
        }
        if (!columns) {
            require(line == "bin_start_ps,count", "bad_histogram", "expected column line 'bin_start_ps,count'");
            columns = true;
            continue;
        }
        const auto c = line.find(',');
        require(c != std::string::npos, "bad_histogram", "expected 'bin_start_ps,count'");
        starts.push_back(detail::parse_int<std::int64_t>(std::string_view(line).substr(0, c), starts.size() + 1));
        h.counts.push_back(detail::parse_int<std::uint64_t>(std::string_view(line).substr(c + 1), starts.size()));
    }
    require(columns, "bad_histogram", "histogram file has no column line");
    if (!meta.empty()) {
        try {
            const auto j = nlohmann::json::parse(meta);
            h.bin_width_ps = j.value("bin_width_ps", std::int64_t{0});
            h.total_pulses = j.value("total_pulses", std::int64_t{0});
        } catch (const nlohmann::json::exception& e) {
            throw Error("bad_histogram", std::string("histogram header is not JSON: ") + e.what());
        }
    }
    if (h.bin_width_ps == 0 && starts.size() >= 2) h.bin_width_ps = starts[1] - starts[0];
    require(h.bin_width_ps >= 1, "bad_histogram", "cannot determine histogram bin width");
    for (std::size_t i = 0; i < starts.size(); ++i)
        require(starts[i] == static_cast<std::int64_t>(i) * h.bin_width_ps, "bad_histogram", "bins must be contiguous from 0");
    return h;
}

// ---------------------------------------------------------------------------
// Coincidence histogram of (t1 - t0) for detector-0 / detector-1 pairs.
// The axis covers [-(K + 1/2) P, (K + 1/2) P] so that K full side peaks per side
// are inside the range; bins are centered on multiples of the bin width.

struct CoincidenceHistogram {
    std::int64_t bin_width_ps = 1000;
    std::int64_t period_ps = 0;
    int periods = 3;                   // K
    std::vector<std::uint64_t> counts; // bin i centered at (i - half_bins) * bin_width
    std::int64_t total_pulses = 0;

    std::int64_t half_bins() const { return static_cast<std::int64_t>(counts.size() / 2); }
    std::int64_t bin_center_ps(std::size_t i) const { return (static_cast<std::int64_t>(i) - half_bins()) * bin_width_ps; }

    CoincidenceHistogram& operator+=(const CoincidenceHistogram& o) {
        require(o.bin_width_ps == bin_width_ps && o.counts.size() == counts.size() && o.period_ps == period_ps,
                "histogram_mismatch", "cannot merge coincidence histograms with different axes");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        total_pulses += o.total_pulses;
        return *this;
    }
    friend bool operator==(const CoincidenceHistogram&, const CoincidenceHistogram&) = default;
};

inline CoincidenceHistogram build_coincidence_histogram(const PhotonStream& s, std::int64_t bin_width_ps, int periods = 3) {
    require(bin_width_ps >= 1, "invalid_bin_width", "bin width must be >= 1 ps");
    require(periods >= 3, "invalid_periods", "coincidence axis must span at least 3 periods");
    require(!s.is_pre_detector(), "wrong_stage", "coincidence histogram needs a detected stream");
    CoincidenceHistogram h;
    h.bin_width_ps = bin_width_ps;
    h.period_ps = s.header.period_ps();
    h.periods = periods;
    h.total_pulses = s.header.n_pulses;
    const std::int64_t reach = periods * h.period_ps + h.period_ps / 2;
    const std::int64_t half = (reach + bin_width_ps / 2) / bin_width_ps;
    h.counts.assign(static_cast<std::size_t>(2 * half + 1), 0);

    const auto& rec = s.records;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const std::int64_t ti = s.absolute_ps(rec[i]);
        for (std::size_t j = i + 1; j < rec.size(); ++j) {
            const std::int64_t tj = s.absolute_ps(rec[j]);
            if (tj - ti > reach) break;
            if (rec[i].detector == rec[j].detector || rec[i].detector < 0 || rec[j].detector < 0) continue;
            const std::int64_t delta = rec[i].detector == 0 ? tj - ti : ti - tj;  // t1 - t0
            const std::int64_t q = delta >= 0 ? (delta + bin_width_ps / 2) / bin_width_ps
                                              : -((-delta + bin_width_ps / 2) / bin_width_ps);
            const std::int64_t idx = q + half;
            if (idx >= 0 && idx < static_cast<std::int64_t>(h.counts.size())) ++h.counts[static_cast<std::size_t>(idx)];
        }
    }
    return h;
}

inline void write_coincidence_csv(std::ostream& os, const CoincidenceHistogram& h) {
    os << "# {\"bin_width_ps\":" << h.bin_width_ps << ",\"period_ps\":" << h.period_ps << ",\"periods\":" << h.periods
       << ",\"schema_version\":1,\"total_pulses\":" << h.total_pulses << "}\n";
    os << "delay_ps,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) os << h.bin_center_ps(i) << ',' << h.counts[i] << '\n';
}

} // namespace qcount
