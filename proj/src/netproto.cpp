#include "umic/netproto.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace umic {

namespace {

constexpr std::uint8_t kMagic[4] = {'U', 'M', 'I', 'C'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
  return v;
}

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

void check_layout(std::uint8_t mask, std::size_t payload_len) {
  if (mask & ~(kChannelMic | kChannelSync)) throw FramingError("frame: unknown channel mask bits");
  if (payload_len > kMaxPayload) throw FramingError("frame: payload too large");
  const auto planes = static_cast<std::size_t>(std::popcount(mask));
  if (planes == 0) {
    if (payload_len != 0) throw FramingError("frame: payload without channels");
  } else if (payload_len % planes != 0) {
    throw FramingError("frame: payload does not split into channel planes");
  }
}

}  // namespace

std::size_t Frame::planes() const noexcept { return static_cast<std::size_t>(std::popcount(channel_mask)); }

std::vector<std::uint8_t> encode_frame(const Frame& f) {
  check_layout(f.channel_mask, f.payload.size());
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + f.payload.size() + kFrameCrcSize);
  for (const auto b : kMagic) out.push_back(b);
  out.push_back(kFrameVersion);
  put_le(out, f.node_id);
  put_le(out, f.seq);
  put_le(out, f.first_sample_index);
  out.push_back(f.channel_mask);
  put_le(out, static_cast<std::uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  put_le(out, crc_of(out.data(), out.size()));
  return out;
}

std::optional<Frame> decode_frame(std::span<const std::uint8_t> bytes, std::size_t& consumed,
                                  std::size_t* needed) {
  consumed = 0;
  // Reject bad magic as soon as the bytes are there.
  const std::size_t have_magic = std::min<std::size_t>(bytes.size(), 4);
  if (std::memcmp(bytes.data(), kMagic, have_magic) != 0) throw FramingError("frame: bad magic");
  if (bytes.size() >= 5 && bytes[4] != kFrameVersion) {
    throw FramingError("frame: unsupported version " + std::to_string(bytes[4]));
  }
  if (bytes.size() < kFrameHeaderSize) {
    if (needed) *needed = kFrameHeaderSize;
    return std::nullopt;
  }
  const std::uint8_t* p = bytes.data();
  const auto mask = p[19];
  const auto len = get_le<std::uint32_t>(p + 20);
  check_layout(mask, len);
  const std::size_t total = kFrameHeaderSize + len + kFrameCrcSize;
  if (bytes.size() < total) {
    if (needed) *needed = total;
    return std::nullopt;
  }
  const auto crc = get_le<std::uint32_t>(p + kFrameHeaderSize + len);
  if (crc != crc_of(p, kFrameHeaderSize + len)) throw CorruptionError("frame: CRC mismatch");
  Frame f;
  f.node_id = get_le<std::uint16_t>(p + 5);
  f.seq = get_le<std::uint32_t>(p + 7);
  f.first_sample_index = get_le<std::uint64_t>(p + 11);
  f.channel_mask = mask;
  f.payload.assign(p + kFrameHeaderSize, p + kFrameHeaderSize + len);
  consumed = total;
  return f;
}

Frame make_end_frame(std::uint16_t node_id, std::uint32_t seq, std::uint64_t end_index) {
  Frame f;
  f.node_id = node_id;
  f.seq = seq;
  f.first_sample_index = end_index;
  f.channel_mask = 0;
  return f;
}

std::vector<Frame> frames_of(const NodeRecording& rec, std::size_t chunk_samples) {
  rec.validate();
  if (chunk_samples == 0) throw ParameterError("frames_of: chunk_samples must be positive");
  const std::size_t n = rec.size();
  std::vector<Frame> out;
  out.reserve(n / chunk_samples + 2);
  std::uint32_t seq = 0;
  for (std::size_t pos = 0; pos < n; pos += chunk_samples) {
    const std::size_t count = std::min(chunk_samples, n - pos);
    Frame f;
    f.node_id = rec.node_id;
    f.seq = seq++;
    f.first_sample_index = rec.first_sample_index + pos;
    const auto mic = rec.mic.bits.slice(pos, count);
    const auto sync = rec.sync.bits.slice(pos, count);
    f.payload.reserve(mic.bytes().size() * 2);
    f.payload.insert(f.payload.end(), mic.bytes().begin(), mic.bytes().end());
    f.payload.insert(f.payload.end(), sync.bytes().begin(), sync.bytes().end());
    out.push_back(std::move(f));
  }
  out.push_back(make_end_frame(rec.node_id, seq, rec.first_sample_index + n));
  return out;
}

void FrameParser::feed(std::span<const std::uint8_t> bytes) {
  if (pos_ > 0 && pos_ >= buffer_.size() / 2) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameParser::next() {
  if (pos_ == buffer_.size()) return std::nullopt;
  std::size_t used = 0;
  auto f = decode_frame(std::span<const std::uint8_t>(buffer_).subspan(pos_), used);
  pos_ += used;
  return f;
}

Reassembler::Reassembler(std::uint16_t node_id, double sample_rate)
    : node_id_(node_id), sample_rate_(sample_rate) {
  if (!(sample_rate > 0.0)) throw ParameterError("reassembler: sample rate must be positive");
}

void Reassembler::place(const Frame& f, std::uint64_t count) {
  const std::size_t nplanes = f.planes();
  const std::size_t plane_bytes = f.payload.size() / nplanes;
  count = std::min<std::uint64_t>(count, plane_bytes * 8);
  const auto at = static_cast<std::size_t>(f.first_sample_index - base_);
  // Samples of frames lost before this one read as zero.
  if (mic_.size() < at) {
    mic_.resize(at);
    sync_.resize(at);
  }
  std::span<const std::uint8_t> payload(f.payload);
  std::size_t plane = 0;
  for (std::uint8_t ch : {kChannelMic, kChannelSync}) {
    BitBuffer& dst = ch == kChannelMic ? mic_ : sync_;
    if (f.channel_mask & ch) {
      const auto bits = BitBuffer::from_bytes(payload.subspan(plane * plane_bytes, plane_bytes), plane_bytes * 8);
      dst.append(bits, 0, static_cast<std::size_t>(count));
      ++plane;
    } else {
      dst.resize(at + static_cast<std::size_t>(count));
    }
  }
}

void Reassembler::push(const Frame& f) {
  if (f.node_id != node_id_) {
    throw FramingError("reassembler: frame from node " + std::to_string(f.node_id) + " in stream of node " +
                       std::to_string(node_id_));
  }
  if (started_ && f.seq < next_seq_) {
    ++duplicates_;
    return;
  }
  if (ended_) throw FramingError("reassembler: frame after end of stream");
  check_layout(f.channel_mask, f.payload.size());
  if (f.seq > next_seq_) gaps_.push_back(SeqGap{node_id_, next_seq_, f.seq - 1});
  next_seq_ = f.seq + 1;
  ++frames_;
  if (!started_) {
    started_ = true;
    base_ = f.first_sample_index;
  }
  const std::uint64_t written = base_ + mic_.size();
  if (f.first_sample_index < written || (pending_ && f.first_sample_index < pending_->first_sample_index)) {
    throw FramingError("reassembler: sample index runs backwards at seq " + std::to_string(f.seq));
  }
  if (pending_) {
    const std::uint64_t count = f.first_sample_index - pending_->first_sample_index;
    const std::uint64_t plane_bits = pending_->payload.size() / pending_->planes() * 8;
    // Consecutive frames must agree with the packed plane length.
    if (f.seq == pending_->seq + 1 && (count > plane_bits || count + 8 <= plane_bits)) {
      throw FramingError("reassembler: frame " + std::to_string(pending_->seq) + " length disagrees with sample index");
    }
    place(*pending_, count);
    pending_.reset();
  }
  if (f.is_end()) {
    ended_ = true;
    const auto total = static_cast<std::size_t>(f.first_sample_index - base_);
    mic_.resize(total);
    sync_.resize(total);
  } else {
    pending_ = f;
  }
}

NodeRecording Reassembler::take(StreamStats& stats) {
  if (pending_) {
    // No successor: the whole plane, including any padding bits.
    place(*pending_, pending_->payload.size() / pending_->planes() * 8);
    pending_.reset();
  }
  stats.truncated = !ended_;
  stats.duplicates = duplicates_;
  stats.gaps = gaps_;
  if (!ended_) stats.gaps.push_back(SeqGap{node_id_, next_seq_, std::nullopt});

  NodeRecording rec;
  rec.node_id = node_id_;
  rec.first_sample_index = base_;
  rec.start_local = static_cast<double>(base_) / sample_rate_;
  rec.mic.bits = std::move(mic_);
  rec.mic.sample_rate = sample_rate_;
  rec.sync.bits = std::move(sync_);
  rec.sync.sample_rate = sample_rate_;
  rec.sync.start_local = rec.start_local;
  mic_ = BitBuffer();
  sync_ = BitBuffer();
  return rec;
}

void write_recording_file(const std::filesystem::path& path, const NodeRecording& recording,
                          std::size_t chunk_samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& f : frames_of(recording, chunk_samples)) {
    const auto bytes = encode_frame(f);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw Error("write failed: " + path.string());
}

NodeRecording read_recording_file(const std::filesystem::path& path, StreamStats* stats) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::span<const std::uint8_t> rest(bytes);
  std::optional<Reassembler> ra;
  while (!rest.empty()) {
    std::size_t used = 0;
    auto f = decode_frame(rest, used);
    if (!f) throw FramingError(path.string() + ": truncated frame at end of file");
    rest = rest.subspan(used);
    if (!ra) ra.emplace(f->node_id);
    ra->push(*f);
  }
  if (!ra) throw FramingError(path.string() + ": no frames");
  StreamStats local;
  auto rec = ra->take(stats ? *stats : local);
  return rec;
}

std::string recording_digest(const NodeRecording& rec) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("digest: out of memory");
  std::uint8_t count[8];
  const auto n = static_cast<std::uint64_t>(rec.size());
  for (int i = 0; i < 8; ++i) count[i] = static_cast<std::uint8_t>(n >> (8 * i));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, count, sizeof count) == 1 &&
                  EVP_DigestUpdate(ctx, rec.mic.bits.bytes().data(), rec.mic.bits.bytes().size()) == 1 &&
                  EVP_DigestUpdate(ctx, rec.sync.bits.bytes().data(), rec.sync.bits.bytes().size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &md_len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("digest: SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

}  // namespace umic
