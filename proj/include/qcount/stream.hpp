// stream.hpp: time-tagged photon records and their CSV / binary file formats.
//
// CSV layout:
//   # {"config_hash":"...","n_pulses":100000,"period_ns":1000.0,"schema_version":1,"seed":7,"stage":"pre"}
//   pulse_index,detector,delay_ps
//   0,-1,15320
//   ...
// detector is 0 or 1 after the detector chain and -1 for pre-detector streams.
//
// Binary layout ("QDT1"): 4-byte magic, u32 little-endian header length, the
// header JSON, then 12-byte records {u32 pulse_index, i16 detector,
// u16 reserved, u32 delay_ps}.
#pragma once

#include "qcount/error.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace qcount {

inline constexpr int kPreDetector = -1;
inline constexpr int kStreamSchemaVersion = 1;

struct PhotonRecord {
    std::int64_t pulse_index = 0;
    int detector = kPreDetector;
    std::int64_t delay_ps = 0;

    friend bool operator==(const PhotonRecord&, const PhotonRecord&) = default;
};

struct StreamHeader {
    double period_ns = 0.0;
    std::int64_t n_pulses = 0;
    std::uint64_t seed = 0;
    std::string stage = "pre";  // "pre" or "detected"
    std::string config_hash;
    int schema_version = kStreamSchemaVersion;

    std::int64_t period_ps() const { return static_cast<std::int64_t>(std::llround(period_ns * 1000.0)); }

    friend bool operator==(const StreamHeader&, const StreamHeader&) = default;
};

struct PhotonStream {
    StreamHeader header;
    std::vector<PhotonRecord> records;

    bool is_pre_detector() const { return header.stage == "pre"; }
    std::int64_t absolute_ps(const PhotonRecord& r) const { return r.pulse_index * header.period_ps() + r.delay_ps; }

    friend bool operator==(const PhotonStream&, const PhotonStream&) = default;
};

inline nlohmann::json to_json(const StreamHeader& h) {
    return {{"schema_version", h.schema_version}, {"period_ns", h.period_ns}, {"n_pulses", h.n_pulses},
            {"seed", h.seed},                     {"stage", h.stage},         {"config_hash", h.config_hash}};
}

inline StreamHeader header_from_json(const nlohmann::json& j) {
    StreamHeader h;
    try {
        h.schema_version = j.at("schema_version").get<int>();
        h.period_ns = j.at("period_ns").get<double>();
        h.n_pulses = j.at("n_pulses").get<std::int64_t>();
        h.seed = j.at("seed").get<std::uint64_t>();
        h.stage = j.at("stage").get<std::string>();
        h.config_hash = j.value("config_hash", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_stream_header", std::string("malformed stream header: ") + e.what());
    }
    require(h.schema_version == kStreamSchemaVersion, "bad_stream_header", "unsupported stream schema_version");
    require(h.period_ns > 0.0, "bad_stream_header", "period_ns must be positive");
    require(h.stage == "pre" || h.stage == "detected", "bad_stream_header", "stage must be 'pre' or 'detected'");
    return h;
}

inline void validate(const PhotonStream& s) {
    const auto period = s.header.period_ps();
    std::int64_t last = std::numeric_limits<std::int64_t>::min();
    for (const auto& r : s.records) {
        require(r.delay_ps >= 0 && r.delay_ps < period, "bad_record", "delay_ps must lie in [0, period)");
        require(r.pulse_index >= 0 && r.pulse_index < std::max<std::int64_t>(s.header.n_pulses, 1), "bad_record",
                "pulse_index outside [0, n_pulses)");
        require(r.detector >= -1 && r.detector <= 1, "bad_record", "detector must be -1, 0 or 1");
        const auto t = s.absolute_ps(r);
        require(t >= last, "unsorted_stream", "records must be sorted by absolute time");
        last = t;
    }
}

// ---------------------------------------------------------------------------
// CSV

inline void write_stream_header_csv(std::ostream& os, const StreamHeader& h) {
    os << "# " << to_json(h).dump() << '\n' << "pulse_index,detector,delay_ps\n";
}

inline void write_record_csv(std::ostream& os, const PhotonRecord& r) {
    os << r.pulse_index << ',' << r.detector << ',' << r.delay_ps << '\n';
}

inline void write_stream_csv(std::ostream& os, const PhotonStream& s) {
    write_stream_header_csv(os, s.header);
    for (const auto& r : s.records) write_record_csv(os, r);
}

namespace detail {

template <class Int>
Int parse_int(std::string_view sv, std::size_t line) {
    Int v{};
    auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
    if (ec != std::errc{} || p != sv.data() + sv.size())
        throw Error("bad_record", "line " + std::to_string(line) + ": expected integer, got '" + std::string(sv) + "'");
    return v;
}

} // namespace detail

// Streaming reader: holds one line at a time so histogramming stays in bounded memory.
class StreamCsvReader {
public:
    explicit StreamCsvReader(std::istream& is) : is_(is) {
        std::string json_text;
        std::string line;
        bool have_columns = false;
        while (std::getline(is_, line)) {
            ++line_no_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line[0] == '#') {
                json_text += line.substr(1);
                continue;
            }
            require(line == "pulse_index,detector,delay_ps", "bad_stream_header",
                    "expected column line 'pulse_index,detector,delay_ps'");
            have_columns = true;
            break;
        }
        require(have_columns, "bad_stream_header", "stream file has no column line");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(json_text);
        } catch (const nlohmann::json::exception& e) {
            throw Error("bad_stream_header", std::string("header comment is not JSON: ") + e.what());
        }
        header_ = header_from_json(j);
    }

    const StreamHeader& header() const noexcept { return header_; }

    bool next(PhotonRecord& r) {
        std::string line;
        while (std::getline(is_, line)) {
            ++line_no_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const auto c1 = line.find(',');
            const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
            require(c1 != std::string::npos && c2 != std::string::npos, "bad_record",
                    "line " + std::to_string(line_no_) + ": expected three comma-separated fields");
            const std::string_view sv(line);
            r.pulse_index = detail::parse_int<std::int64_t>(sv.substr(0, c1), line_no_);
            r.detector = detail::parse_int<int>(sv.substr(c1 + 1, c2 - c1 - 1), line_no_);
            r.delay_ps = detail::parse_int<std::int64_t>(sv.substr(c2 + 1), line_no_);
            return true;
        }
        return false;
    }

private:
    std::istream& is_;
    StreamHeader header_;
    std::size_t line_no_ = 0;
};

inline PhotonStream read_stream_csv(std::istream& is) {
    StreamCsvReader reader(is);
    PhotonStream s;
    s.header = reader.header();
    PhotonRecord r;
    while (reader.next(r)) s.records.push_back(r);
    validate(s);
    return s;
}

// ---------------------------------------------------------------------------
// Binary

inline constexpr std::array<char, 4> kBinaryMagic{'Q', 'D', 'T', '1'};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return static_cast<T>(u);
}

} // namespace detail

inline void write_stream_binary(std::ostream& os, const PhotonStream& s) {
    os.write(kBinaryMagic.data(), kBinaryMagic.size());
    const std::string h = to_json(s.header).dump();
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& r : s.records) {
        require(r.pulse_index >= 0 && r.pulse_index <= std::numeric_limits<std::uint32_t>::max(), "binary_range",
                "pulse_index does not fit the binary format");
        require(r.delay_ps >= 0 && r.delay_ps <= std::numeric_limits<std::uint32_t>::max(), "binary_range",
                "delay_ps does not fit the binary format");
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.pulse_index));
        detail::put_le<std::int16_t>(os, static_cast<std::int16_t>(r.detector));
        detail::put_le<std::uint16_t>(os, 0);
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.delay_ps));
    }
}

inline PhotonStream read_stream_binary(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    require(is.good() && magic == kBinaryMagic, "bad_magic", "not a QDT1 binary stream");
    unsigned char len_buf[4];
    is.read(reinterpret_cast<char*>(len_buf), 4);
    require(is.good(), "bad_stream_header", "truncated binary header");
    const auto len = detail::get_le<std::uint32_t>(len_buf);
    std::string h(len, '\0');
    is.read(h.data(), len);
    require(is.good(), "bad_stream_header", "truncated binary header");
    PhotonStream s;
    try {
        s.header = header_from_json(nlohmann::json::parse(h));
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_stream_header", std::string("binary header is not JSON: ") + e.what());
    }
    unsigned char rec[12];
    while (is.read(reinterpret_cast<char*>(rec), sizeof rec)) {
        PhotonRecord r;
        r.pulse_index = detail::get_le<std::uint32_t>(rec);
        r.detector = detail::get_le<std::int16_t>(rec + 4);
        r.delay_ps = detail::get_le<std::uint32_t>(rec + 8);
        s.records.push_back(r);
    }
    require(is.gcount() == 0, "bad_record", "binary stream ends with a partial record");
    validate(s);
    return s;
}

inline bool is_binary_stream_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::array<char, 4> magic{};
    f.read(magic.data(), magic.size());
    return f.good() && magic == kBinaryMagic;
}

inline PhotonStream read_stream_file(const std::string& path) {
    if (is_binary_stream_file(path)) {
        std::ifstream f(path, std::ios::binary);
        return read_stream_binary(f);
    }
    std::ifstream f(path);
    require(f.good(), "missing_file", "cannot open stream file '" + path + "'");
    return read_stream_csv(f);
}

inline void write_stream_file(const std::string& path, const PhotonStream& s, bool binary = false) {
    std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
    require(f.good(), "io_error", "cannot write '" + path + "'");
    if (binary)
        write_stream_binary(f, s);
    else
        write_stream_csv(f, s);
    require(f.good(), "io_error", "write to '" + path + "' failed");
}

} // namespace qcount
