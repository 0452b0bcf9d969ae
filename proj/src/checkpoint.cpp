#include "vicha/checkpoint.hpp"

#include "vicha/config.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace vicha {

using nlohmann::json;

namespace {
constexpr char kMagic[] = "VICHA1\n";
constexpr size_t kMagicLen = 7;
}  // namespace

const Mat& ArrayArchive::find(const std::string& name) const {
    for (const auto& [n, m] : arrays)
        if (n == name) return m;
    throw ConfigError("archive: no array named " + name);
}

bool ArrayArchive::contains(const std::string& name) const {
    for (const auto& [n, m] : arrays)
        if (n == name) return true;
    return false;
}

void write_array_archive(const std::string& path, const ArrayArchive& archive) {
    json arrays = json::array();
    for (const auto& [name, m] : archive.arrays)
        arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    json header{{"meta", json::parse(archive.meta_json)}, {"arrays", arrays}};
    std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("write_array_archive: cannot open " + path);
    out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
    uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, m] : archive.arrays) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            out.write(reinterpret_cast<const char*>(m.row(r).eval().data()),
                      static_cast<std::streamsize>(sizeof(double) * m.cols()));
    }
    if (!out) throw ConfigError("write_array_archive: write failed for " + path);
}

ArrayArchive read_array_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("read_array_archive: cannot open " + path);
    char magic[kMagicLen];
    in.read(magic, static_cast<std::streamsize>(kMagicLen));
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw ConfigError("read_array_archive: bad magic in " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw ConfigError("read_array_archive: truncated header in " + path);

    json header = json::parse(header_str);
    ArrayArchive archive;
    archive.meta_json = header.at("meta").dump();
    for (const auto& a : header.at("arrays")) {
        const auto rows = a.at("rows").get<Eigen::Index>();
        const auto cols = a.at("cols").get<Eigen::Index>();
        Mat m(rows, cols);
        std::vector<double> buf(static_cast<size_t>(cols));
        for (Eigen::Index r = 0; r < rows; ++r) {
            in.read(reinterpret_cast<char*>(buf.data()),
                    static_cast<std::streamsize>(sizeof(double) * cols));
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = buf[static_cast<size_t>(c)];
        }
        archive.arrays.emplace_back(a.at("name").get<std::string>(), std::move(m));
    }
    if (!in) throw ConfigError("read_array_archive: truncated payload in " + path);
    return archive;
}

}  // namespace vicha
