#include "octvae/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "octvae/error.hpp"

namespace octvae {

namespace {

constexpr char kMagic[8] = {'O', 'C', 'T', 'V', 'A', 'E', 'C', 'K'};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_unsigned_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void put_bytes(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, const std::string& origin)
        : bytes_(bytes), end_(end), origin_(origin) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return end_ - pos_; }

private:
    void need(std::size_t n) const {
        if (end_ - pos_ < n) throw IoError("truncated checkpoint " + origin_);
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
    const std::string& origin_;
};

} // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
    return it == arrays.end() ? nullptr : &*it;
}

const NamedArray& Checkpoint::at(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw IoError("checkpoint has no array '" + name + "'");
}

void Checkpoint::put(std::string name, Shape shape, std::vector<float> values) {
    if (shape_numel(shape) != values.size())
        throw ContractViolation("checkpoint array '" + name + "': shape " + shape_to_string(shape) +
                                " does not match " + std::to_string(values.size()) + " values");
    if (find(name)) throw ContractViolation("duplicate checkpoint array '" + name + "'");
    arrays.push_back({std::move(name), std::move(shape), std::move(values)});
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) return std::nullopt;
    return it->second;
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw IoError("checkpoint metadata lacks '" + key + "'");
    return it->second;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
    Writer w;
    w.put_bytes(std::string_view(kMagic, 8));
    w.put(kCheckpointVersion);
    std::string meta;
    for (const auto& [k, v] : checkpoint.metadata) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw ContractViolation("checkpoint metadata entry '" + k + "' contains '=' or a newline");
        meta += k + "=" + v + "\n";
    }
    w.put(static_cast<std::uint64_t>(meta.size()));
    w.put_bytes(meta);
    w.put(static_cast<std::uint32_t>(checkpoint.arrays.size()));
    for (const auto& a : checkpoint.arrays) {
        w.put(static_cast<std::uint32_t>(a.name.size()));
        w.put_bytes(a.name);
        w.put(static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) w.put(static_cast<std::uint64_t>(d));
        for (float v : a.values) w.put_f32(v);
    }
    w.put(fnv1a(w.bytes.data(), w.bytes.size()));
    return std::move(w.bytes);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 8 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + origin);
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
    Reader r(bytes, body, origin);
    r.get_bytes(8);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint " + origin + " has format version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    if (fnv1a(bytes.data(), body) != stored) throw IoError("checkpoint " + origin + " is corrupt (checksum mismatch)");

    Checkpoint ck;
    const auto meta_len = r.get<std::uint64_t>();
    if (meta_len > r.remaining()) throw IoError("truncated checkpoint " + origin);
    std::istringstream meta(r.get_bytes(meta_len));
    for (std::string line; std::getline(meta, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed checkpoint metadata line '" + line + "' in " + origin);
        ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.get_bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        const std::size_t n = shape_numel(a.shape);
        if (n > r.remaining() / 4) throw IoError("truncated checkpoint " + origin + " in array '" + a.name + "'");
        a.values.resize(n);
        for (auto& v : a.values) v = r.get_f32();
        ck.arrays.push_back(std::move(a));
    }
    if (r.remaining() != 0) throw IoError("trailing bytes in checkpoint " + origin);
    return ck;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string() + " (disk full?)");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot rename " + tmp.string() + " to " + path.string());
    }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(checkpoint);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return deserialize_checkpoint(bytes, path.string());
}

} // namespace octvae
