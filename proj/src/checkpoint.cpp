#include "affordgen/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "affordgen/error.hpp"

namespace afford {

namespace {

constexpr char kMagic[5] = {'A', 'F', 'L', 'B', '1'};

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    write_u64(os, v);
}

double read_f64(std::istream& is) {
    const uint64_t v = read_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

} // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) return &t;
    }
    return nullptr;
}

void CheckpointData::add(std::string name, Tensor value) {
    entries.emplace_back(std::move(name), std::move(value));
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) raise(ErrorCode::Io, "cannot open checkpoint for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    for (const auto& [name, t] : data.entries) {
        write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(os, static_cast<uint64_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) write_u64(os, static_cast<uint64_t>(t.dim(i)));
        for (int64_t i = 0; i < t.numel(); ++i) write_f64(os, t[i]);
    }
    if (!os) raise(ErrorCode::Io, "checkpoint write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) raise(ErrorCode::NotFound, "checkpoint not found: " + path);
    char magic[5];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        raise(ErrorCode::Format, "bad checkpoint magic in " + path);
    }
    CheckpointData data;
    while (true) {
        const int peeked = is.peek();
        if (peeked == std::char_traits<char>::eof()) break;
        const uint64_t name_len = read_u64(is);
        if (!is) raise(ErrorCode::Format, "truncated checkpoint entry header in " + path);
        if (name_len > (1u << 16)) raise(ErrorCode::Format, "implausible name length in " + path);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        const uint64_t rank = read_u64(is);
        if (!is || rank > 8) raise(ErrorCode::Format, "bad tensor rank in " + path);
        std::vector<int64_t> shape(rank);
        int64_t numel = 1;
        for (uint64_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int64_t>(read_u64(is));
            if (!is || shape[i] <= 0) raise(ErrorCode::Format, "bad tensor dim in " + path);
            numel *= shape[i];
        }
        std::vector<double> values(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i) values[static_cast<size_t>(i)] = read_f64(is);
        if (!is) raise(ErrorCode::Format, "truncated tensor data in " + path);
        data.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return data;
}

} // namespace afford
