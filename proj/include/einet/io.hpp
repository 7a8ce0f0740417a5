#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "einet/compiler.hpp"
#include "einet/errors.hpp"
#include "einet/model.hpp"
#include "einet/tensor.hpp"

namespace einet {

namespace io_detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write to '" + path + "' failed");
}

inline std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in pieces.
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), n);
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

inline nlohmann::json number_or_null(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

inline double double_or_inf(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace io_detail

inline nlohmann::json to_json(const Projection& p) {
    return {{"var_min", p.var_min},
            {"var_max", io_detail::number_or_null(p.var_max)},
            {"prob_floor", p.prob_floor},
            {"eps_count", p.eps_count}};
}

inline Projection projection_from_json(const nlohmann::json& j) {
    Projection p;
    p.var_min = j.at("var_min").get<double>();
    p.var_max = io_detail::double_or_inf(j.at("var_max"));
    p.prob_floor = j.at("prob_floor").get<double>();
    p.eps_count = j.at("eps_count").get<double>();
    return p;
}

// Model file layout:
//   "EINM1" | u64 header length | header JSON | blobs
// Each blob is a u64 element count followed by that many little-endian f64
// values. The header lists blob names and counts in file order and carries
// the CRC32 of the whole blob section.
inline constexpr std::string_view model_magic = "EINM1";

namespace io_detail {

struct TensorRef {
    std::string name;
    std::size_t count;
};

inline std::vector<TensorRef> tensor_list(const Model& m) {
    std::vector<TensorRef> out;
    for (std::size_t li = 0; li < m.circuit.layers.size(); ++li) {
        const auto& l = m.circuit.layers[li];
        if (l.kind == LayerKind::leaf) continue;
        out.push_back({std::string(l.kind == LayerKind::einsum ? "W" : "w") + "[" + std::to_string(li) + "]",
                       weight_count(m.circuit, li)});
    }
    out.push_back({"phi", m.params.leaves.phi.size()});
    return out;
}

}  // namespace io_detail

inline std::string serialize_model(const Model& m) {
    std::string blobs;
    nlohmann::json tensors = nlohmann::json::array();
    auto put_blob = [&](const std::string& name, const std::vector<double>& v) {
        tensors.push_back({{"name", name}, {"count", v.size()}});
        io_detail::put_le<std::uint64_t>(blobs, v.size());
        for (double x : v) io_detail::put_le<std::uint64_t>(blobs, std::bit_cast<std::uint64_t>(x));
    };
    for (std::size_t li = 0; li < m.circuit.layers.size(); ++li) {
        const auto& l = m.circuit.layers[li];
        if (l.kind == LayerKind::leaf) continue;
        put_blob(std::string(l.kind == LayerKind::einsum ? "W" : "w") + "[" + std::to_string(li) + "]",
                 m.params.weights[li]);
    }
    put_blob("phi", m.params.leaves.phi);

    const nlohmann::json header{
        {"format", 1},
        {"region_graph", to_json(m.graph)},
        {"k", m.circuit.k},
        {"k_root", m.circuit.k_root},
        {"leaf", to_json(m.leaf_spec())},
        {"num_replica", m.circuit.num_replica()},
        {"replica", m.circuit.replica.of_region},
        {"plan", plan_to_json(m.circuit)},
        {"projection", to_json(m.projection)},
        {"eps_w", m.eps_w},
        {"provenance", m.provenance},
        {"tensors", tensors},
        {"crc32", io_detail::crc32_of(blobs)},
        {"blob_bytes", blobs.size()},
    };
    const auto text = header.dump();
    std::string out(model_magic);
    io_detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    out += blobs;
    return out;
}

inline Model deserialize_model(std::string_view bytes) {
    using io_detail::get_le;
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < model_magic.size() || bytes.substr(0, model_magic.size()) != model_magic)
        throw MagicError("not a model file (bad magic)");
    std::size_t pos = model_magic.size();
    if (bytes.size() < pos + 8) throw ChecksumError("model file truncated in header length");
    const auto hlen = get_le<std::uint64_t>(p + pos);
    pos += 8;
    if (hlen > bytes.size() - pos) throw ChecksumError("model file truncated in header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model header is not valid JSON: ") + e.what());
    }
    pos += hlen;

    const auto blobs = bytes.substr(pos);
    if (blobs.size() != header.at("blob_bytes").get<std::size_t>() ||
        io_detail::crc32_of(blobs) != header.at("crc32").get<std::uint32_t>())
        throw ChecksumError("model blob checksum mismatch (corrupt or truncated file)");

    Model m;
    m.graph = region_graph_from_json(header.at("region_graph"));
    require_valid(m.graph);
    m.circuit = compile(m.graph, header.at("k").get<std::size_t>(), header.at("k_root").get<std::size_t>());
    if (plan_to_json(m.circuit) != header.at("plan") ||
        m.circuit.replica.of_region != header.at("replica").get<std::vector<std::size_t>>())
        throw ShapeError("stored layer plan does not match the recompiled region graph");
    m.projection = projection_from_json(header.at("projection"));
    m.eps_w = header.at("eps_w").get<double>();
    m.provenance = header.value("provenance", nlohmann::json::object());
    const auto spec = expfam_from_json(header.at("leaf"));
    m.params.weights.assign(m.circuit.layers.size(), {});
    m.params.leaves = EfParams(spec, m.circuit.d_vars, m.circuit.k, m.circuit.num_replica());

    const auto expected = io_detail::tensor_list(m);
    const auto& declared = header.at("tensors");
    if (declared.size() != expected.size())
        throw ShapeError("header declares " + std::to_string(declared.size()) + " tensors, circuit needs " +
                         std::to_string(expected.size()));
    std::size_t bpos = 0;
    std::size_t ti = 0;
    auto read_blob = [&](std::vector<double>& dst) {
        const auto& want = expected[ti];
        const auto& decl = declared[ti];
        ++ti;
        if (decl.at("name").get<std::string>() != want.name)
            throw ShapeError("tensor '" + decl.at("name").get<std::string>() + "' found where '" + want.name +
                             "' was expected");
        if (decl.at("count").get<std::size_t>() != want.count)
            throw ShapeError("tensor '" + want.name + "' declares " + decl.at("count").dump() + " entries, circuit needs " +
                             std::to_string(want.count));
        if (bpos + 8 > blobs.size()) throw ShapeError("tensor '" + want.name + "' is missing from the blob section");
        const auto n = get_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(blobs.data()) + bpos);
        bpos += 8;
        if (n != want.count)
            throw ShapeError("tensor '" + want.name + "' blob holds " + std::to_string(n) + " entries, header declares " +
                             std::to_string(want.count));
        if (n > (blobs.size() - bpos) / 8) throw ShapeError("tensor '" + want.name + "' blob is shorter than declared");
        dst.resize(n);
        for (std::size_t i = 0; i < n; ++i, bpos += 8)
            dst[i] = std::bit_cast<double>(get_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(blobs.data()) + bpos));
    };
    for (std::size_t li = 0; li < m.circuit.layers.size(); ++li)
        if (m.circuit.layers[li].kind != LayerKind::leaf) read_blob(m.params.weights[li]);
    read_blob(m.params.leaves.phi);
    if (bpos != blobs.size()) throw ShapeError("trailing bytes after the last tensor");
    return m;
}

inline void save_model(const Model& m, const std::string& path) { io_detail::write_file(path, serialize_model(m)); }

inline Model load_model(const std::string& path) { return deserialize_model(io_detail::read_file(path)); }

// ---------------------------------------------------------------- datasets

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline constexpr std::string_view dataset_magic = "EIND1";

struct LoadOptions {
    bool normalize_u8 = true;  // divide u8 payloads by 255
};

struct LoadedDataset {
    Dataset data;
    bool from_u8 = false;  // payload was u8 (discrete unless normalized)
};

inline bool is_binary_dataset(std::string_view bytes) {
    return bytes.size() >= dataset_magic.size() && bytes.substr(0, dataset_magic.size()) == dataset_magic;
}

inline LoadedDataset parse_binary_dataset(std::string_view bytes, const LoadOptions& opt = {}) {
    using io_detail::get_le;
    if (!is_binary_dataset(bytes)) throw MagicError("not a binary dataset (bad magic)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t pos = dataset_magic.size();
    if (bytes.size() < pos + 9) throw ShapeError("binary dataset header truncated");
    const std::size_t n = get_le<std::uint32_t>(p + pos);
    const std::size_t d = get_le<std::uint32_t>(p + pos + 4);
    const auto dtype = p[pos + 8];
    pos += 9;
    if (dtype > 1) throw FormatError("unknown dataset dtype " + std::to_string(dtype));
    const std::size_t width = dtype == 0 ? 4 : 1;
    if (bytes.size() - pos != n * d * width)
        throw ShapeError("dataset payload has " + std::to_string(bytes.size() - pos) + " bytes, header implies " +
                         std::to_string(n * d * width));
    LoadedDataset out;
    out.data = Dataset(n, d);
    out.from_u8 = dtype == 1;
    for (std::size_t i = 0; i < n * d; ++i) {
        if (dtype == 0) {
            out.data.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + pos + 4 * i));
        } else {
            const double v = p[pos + i];
            out.data.values[i] = opt.normalize_u8 ? v / 255.0 : v;
        }
    }
    return out;
}

/// Numeric CSV, one sample per row. A first line containing letters is
/// treated as a header and skipped.
inline Dataset parse_csv_dataset(std::string_view text) {
    Dataset out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
        if (line_no == 1 && std::any_of(line.begin(), line.end(), [](char c) {
                return std::isalpha(static_cast<unsigned char>(c)) && c != 'e' && c != 'E';
            }))
            continue;
        std::size_t cols = 0;
        std::size_t f = 0;
        for (;;) {
            auto comma = line.find(',', f);
            auto field = line.substr(f, comma == std::string_view::npos ? std::string_view::npos : comma - f);
            while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
            while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
            double v = 0;
            const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (ec != std::errc() || ptr != field.data() + field.size() || field.empty())
                throw FormatError("CSV line " + std::to_string(line_no) + ": '" + std::string(field) +
                                  "' is not a number");
            out.values.push_back(v);
            ++cols;
            if (comma == std::string_view::npos) break;
            f = comma + 1;
        }
        if (out.num_samples == 0) out.num_vars = cols;
        else if (cols != out.num_vars)
            throw ShapeError("CSV line " + std::to_string(line_no) + " has " + std::to_string(cols) + " columns, expected " +
                             std::to_string(out.num_vars));
        ++out.num_samples;
    }
    return out;
}

inline LoadedDataset load_dataset(const std::string& path, const LoadOptions& opt = {}) {
    const auto bytes = io_detail::read_file(path);
    if (is_binary_dataset(bytes)) return parse_binary_dataset(bytes, opt);
    return {parse_csv_dataset(bytes), false};
}

inline std::string format_double(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, ptr);
}

inline std::string dataset_to_csv(const Dataset& d) {
    std::string out;
    for (std::size_t i = 0; i < d.num_samples; ++i) {
        for (std::size_t v = 0; v < d.num_vars; ++v) {
            if (v) out.push_back(',');
            out += format_double(d.at(i, v));
        }
        out.push_back('\n');
    }
    return out;
}

inline void save_csv(const Dataset& d, const std::string& path) { io_detail::write_file(path, dataset_to_csv(d)); }

inline std::string dataset_to_binary(const Dataset& d, DType dtype) {
    if (d.num_samples > std::numeric_limits<std::uint32_t>::max() || d.num_vars > std::numeric_limits<std::uint32_t>::max())
        throw ShapeError("dataset too large for the binary format");
    std::string out(dataset_magic);
    io_detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.num_samples));
    io_detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.num_vars));
    out.push_back(static_cast<char>(dtype));
    for (double v : d.values) {
        if (dtype == DType::f32) {
            io_detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        } else {
            if (!(v >= 0 && v <= 255 && v == std::floor(v))) throw InputError("u8 payload needs integers in [0, 255]");
            out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
        }
    }
    return out;
}

inline void save_binary(const Dataset& d, DType dtype, const std::string& path) {
    io_detail::write_file(path, dataset_to_binary(d, dtype));
}

// ---------------------------------------------------------------- images

/// Tiles samples (each height*width*channels values in [0,1], channel-last)
/// into a grid and encodes it as binary PGM (1 channel) or PPM (3 channels).
inline std::string encode_image_grid(const Dataset& d, std::size_t height, std::size_t width, std::size_t channels,
                                     std::size_t columns = 0) {
    if (channels != 1 && channels != 3) throw ConfigError("images need 1 or 3 channels");
    if (d.num_vars != height * width * channels)
        throw ShapeError("samples have " + std::to_string(d.num_vars) + " values, image shape needs " +
                         std::to_string(height * width * channels));
    const std::size_t n = std::max<std::size_t>(d.num_samples, 1);
    if (columns == 0) columns = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    const std::size_t rows = (n + columns - 1) / columns;
    const std::size_t gw = columns * (width + 1) - 1, gh = rows * (height + 1) - 1;
    std::vector<std::uint8_t> px(gw * gh * channels, 0);
    for (std::size_t s = 0; s < d.num_samples; ++s) {
        const std::size_t oy = (s / columns) * (height + 1), ox = (s % columns) * (width + 1);
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                for (std::size_t c = 0; c < channels; ++c) {
                    const double v = std::clamp(d.at(s, (y * width + x) * channels + c), 0.0, 1.0);
                    px[((oy + y) * gw + ox + x) * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
                }
    }
    std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(gw) + " " + std::to_string(gh) + "\n255\n";
    out.append(reinterpret_cast<const char*>(px.data()), px.size());
    return out;
}

inline void save_image_grid(const Dataset& d, std::size_t height, std::size_t width, std::size_t channels,
                            const std::string& path) {
    io_detail::write_file(path, encode_image_grid(d, height, width, channels));
}

}  // namespace einet
