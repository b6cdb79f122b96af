#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "umic/error.hpp"
#include "umic/netproto.hpp"
#include "umic/rng.hpp"

using namespace umic;

namespace {

constexpr double kFs = 4.5e6;

// Bitwise reflected CRC-32 (poly 0xEDB88320), independent of zlib.
std::uint32_t crc32_ref(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

NodeRecording random_recording(NodeId id, std::size_t n, std::uint64_t first, std::uint64_t seed) {
  Rng rng(seed);
  NodeRecording r;
  r.node_id = id;
  r.first_sample_index = first;
  r.start_local = static_cast<double>(first) / kFs;
  r.mic.bits = BitBuffer(n);
  r.sync.bits = BitBuffer(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.mic.bits.set(i, rng.uniform() < 0.5);
    r.sync.bits.set(i, (i / 997) % 3 == 0);
  }
  r.sync.start_local = r.start_local;
  return r;
}

Frame random_frame(Rng& rng) {
  Frame f;
  f.node_id = static_cast<std::uint16_t>(rng.next_u64());
  f.seq = static_cast<std::uint32_t>(rng.next_u64());
  f.first_sample_index = rng.next_u64();
  f.channel_mask = static_cast<std::uint8_t>(rng.next_u64() % 4);
  const std::size_t planes = f.planes();
  const std::size_t plane_bytes = planes == 0 ? 0 : rng.next_u64() % 300;
  f.payload.resize(planes * plane_bytes);
  for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng.next_u64());
  return f;
}

std::vector<std::uint8_t> concat(const std::vector<Frame>& frames) {
  std::vector<std::uint8_t> out;
  for (const auto& f : frames) {
    const auto b = encode_frame(f);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

NodeRecording reassemble(const std::vector<Frame>& frames, StreamStats& stats) {
  Reassembler ra(frames.front().node_id);
  for (const auto& f : frames) ra.push(f);
  return ra.take(stats);
}

}  // namespace

TEST_CASE("frame header layout and CRC") {
  Frame f;
  f.node_id = 0x0102;
  f.seq = 0x03040506;
  f.first_sample_index = 0x0708090a0b0c0d0eULL;
  f.channel_mask = kChannelMic | kChannelSync;
  f.payload = {0xaa, 0x55};
  const auto b = encode_frame(f);
  const std::vector<std::uint8_t> header = {'U', 'M', 'I', 'C', 1, 0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0x0e,
                                            0x0d, 0x0c, 0x0b, 0x0a, 0x09, 0x08, 0x07, 0x03, 2, 0, 0, 0};
  REQUIRE(b.size() == 24 + 2 + 4);
  CHECK(std::vector<std::uint8_t>(b.begin(), b.begin() + 24) == header);
  CHECK(b[24] == 0xaa);
  CHECK(b[25] == 0x55);
  const std::uint32_t crc = crc32_ref(b.data(), 26);
  CHECK(b[26] == (crc & 0xff));
  CHECK(b[27] == ((crc >> 8) & 0xff));
  CHECK(b[28] == ((crc >> 16) & 0xff));
  CHECK(b[29] == (crc >> 24));
  // Check value of the reference CRC itself.
  const std::uint8_t digits[] = {'1', '2', '3', '4', '5', '6', '7', '8', '9'};
  CHECK(crc32_ref(digits, 9) == 0xCBF43926u);
}

TEST_CASE("frame codec: 1000 random frames round-trip") {
  Rng rng(2024);
  std::vector<Frame> frames;
  for (int i = 0; i < 1000; ++i) frames.push_back(random_frame(rng));
  for (const auto& f : frames) {
    const auto b = encode_frame(f);
    std::size_t used = 0;
    const auto g = decode_frame(b, used);
    REQUIRE(g.has_value());
    CHECK(*g == f);
    CHECK(used == b.size());
  }
  // The same frames back to back through the incremental parser, fed in
  // irregular pieces.
  const auto stream = concat(frames);
  FrameParser parser;
  std::vector<Frame> got;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const std::size_t k = std::min<std::size_t>(stream.size() - pos, 1 + rng.next_u64() % 700);
    parser.feed(std::span<const std::uint8_t>(stream).subspan(pos, k));
    pos += k;
    while (auto f = parser.next()) got.push_back(std::move(*f));
  }
  CHECK(got == frames);
  CHECK(parser.buffered() == 0);
}

TEST_CASE("frame codec: truncation asks for more bytes") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_frame(rng);
    const auto b = encode_frame(f);
    for (std::size_t len = 0; len < b.size(); ++len) {
      std::size_t used = 99;
      std::size_t needed = 0;
      const auto g = decode_frame(std::span<const std::uint8_t>(b.data(), len), used, &needed);
      CHECK_FALSE(g.has_value());
      CHECK(used == 0);
      if (len >= kFrameHeaderSize) CHECK(needed == b.size());
    }
  }
}

TEST_CASE("frame codec: every single-bit flip is detected") {
  Frame f;
  f.node_id = 3;
  f.seq = 17;
  f.first_sample_index = 9000 * 17;
  f.payload = {1, 2, 3, 4, 5, 6};
  const auto b = encode_frame(f);
  for (std::size_t bit = 0; bit < b.size() * 8; ++bit) {
    auto c = b;
    c[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    std::size_t used = 0;
    bool rejected = false;
    try {
      rejected = !decode_frame(c, used).has_value();  // a longer length field waits for bytes
    } catch (const FramingError&) {
      rejected = true;
    } catch (const CorruptionError&) {
      rejected = true;
    }
    CHECK(rejected);
  }
  // A payload flip is specifically a CRC failure.
  auto c = b;
  c[26] ^= 0x10;
  std::size_t used = 0;
  CHECK_THROWS_AS(decode_frame(c, used), CorruptionError);
}

TEST_CASE("frame codec: bad magic, version and layout") {
  std::size_t used = 0;
  const std::vector<std::uint8_t> junk = {'G', 'E'};
  CHECK_THROWS_AS(decode_frame(junk, used), FramingError);
  Frame f;
  auto b = encode_frame(f);
  b[4] = 2;
  CHECK_THROWS_AS(decode_frame(b, used), FramingError);
  Frame odd;
  odd.payload = {1, 2, 3};  // two planes cannot share three bytes
  CHECK_THROWS_AS(encode_frame(odd), FramingError);
  Frame bad_mask;
  bad_mask.channel_mask = 0x04;
  CHECK_THROWS_AS(encode_frame(bad_mask), FramingError);
}

TEST_CASE("recording frames reassemble bit-exactly") {
  for (std::size_t chunk : {std::size_t{9000}, std::size_t{7}, std::size_t{64}}) {
    const auto rec = random_recording(4, 30011, 450000, chunk);
    const auto frames = frames_of(rec, chunk);
    CHECK(frames.size() == (30011 + chunk - 1) / chunk + 1);
    CHECK(frames.back().is_end());
    CHECK(frames.back().first_sample_index == 450000 + 30011);
    StreamStats stats;
    const auto out = reassemble(frames, stats);
    CHECK(out.mic.bits == rec.mic.bits);
    CHECK(out.sync.bits == rec.sync.bits);
    CHECK(out.first_sample_index == 450000);
    CHECK(out.start_local == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(recording_digest(out) == recording_digest(rec));
    CHECK(stats.gaps.empty());
    CHECK(stats.duplicates == 0);
    CHECK_FALSE(stats.truncated);
  }
}

TEST_CASE("reassembler: duplicates, gaps and truncation") {
  const auto rec = random_recording(9, 100000, 0, 1);
  auto frames = frames_of(rec, 9000);

  SUBCASE("duplicates are dropped and counted") {
    auto dup = frames;
    dup.insert(dup.begin() + 3, frames[2]);
    dup.insert(dup.begin() + 7, frames[5]);
    StreamStats stats;
    const auto out = reassemble(dup, stats);
    CHECK(stats.duplicates == 2);
    CHECK(recording_digest(out) == recording_digest(rec));
  }
  SUBCASE("a missing frame is a gap and reads as zero") {
    auto lossy = frames;
    lossy.erase(lossy.begin() + 4);
    StreamStats stats;
    const auto out = reassemble(lossy, stats);
    REQUIRE(stats.gaps.size() == 1);
    CHECK(stats.gaps[0] == SeqGap{9, 4, 4});
    CHECK(out.size() == rec.size());
    CHECK(out.mic.bits.count_ones(36000, 45000) == 0);
    CHECK(out.mic.bits.slice(0, 36000) == rec.mic.bits.slice(0, 36000));
    CHECK(out.mic.bits.slice(45000, 55000) == rec.mic.bits.slice(45000, 55000));
  }
  SUBCASE("a stream without its end frame is truncated") {
    auto cut = frames;
    cut.resize(6);
    StreamStats stats;
    const auto out = reassemble(cut, stats);
    CHECK(stats.truncated);
    REQUIRE(stats.gaps.size() == 1);
    CHECK(stats.gaps[0].first == 6);
    CHECK_FALSE(stats.gaps[0].last.has_value());
    CHECK(out.size() == 54000);
    CHECK(out.mic.bits == rec.mic.bits.slice(0, 54000));
  }
  SUBCASE("foreign node and backwards indices are framing errors") {
    Reassembler ra(9);
    ra.push(frames[0]);
    auto other = frames[1];
    other.node_id = 8;
    CHECK_THROWS_AS(ra.push(other), FramingError);
    auto back = frames[1];
    back.first_sample_index = 10;
    CHECK_THROWS_AS(ra.push(back), FramingError);
  }
}

TEST_CASE("empty recording streams as a lone end frame") {
  const auto rec = random_recording(2, 0, 0, 1);
  const auto frames = frames_of(rec);
  REQUIRE(frames.size() == 1);
  CHECK(frames[0].is_end());
  StreamStats stats;
  const auto out = reassemble(frames, stats);
  CHECK(out.size() == 0);
  CHECK_FALSE(stats.truncated);
}

TEST_CASE("recording files") {
  const auto dir = std::filesystem::temp_directory_path() / "umic_netproto_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "node_3.umic";
  const auto rec = random_recording(3, 45001, 900000, 3);
  write_recording_file(path, rec);
  StreamStats stats;
  const auto back = read_recording_file(path, &stats);
  CHECK(back.node_id == 3);
  CHECK(back.mic.bits == rec.mic.bits);
  CHECK(back.sync.bits == rec.sync.bits);
  CHECK(back.start_local == doctest::Approx(0.2).epsilon(1e-15));
  CHECK_FALSE(stats.truncated);

  {
    std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(100);
    io.put('\x5a');
  }
  CHECK_THROWS_AS(read_recording_file(path), CorruptionError);
  std::filesystem::resize_file(path, 50);
  CHECK_THROWS_AS(read_recording_file(path), FramingError);
  CHECK_THROWS_AS(read_recording_file(dir / "missing.umic"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("endpoint parsing and token bucket schedule") {
  const auto e = parse_endpoint("127.0.0.1:9000");
  CHECK(e.host == "127.0.0.1");
  CHECK(e.port == 9000);
  CHECK(parse_endpoint("[::1]:80").host == "::1");
  CHECK_THROWS_AS(parse_endpoint("localhost"), ParameterError);
  CHECK_THROWS_AS(parse_endpoint("localhost:70000"), ParameterError);
  CHECK_THROWS_AS(parse_endpoint(":80"), ParameterError);

  TokenBucket tb(1e6);
  CHECK(tb.reserve(1000) == doctest::Approx(1e-3));
  CHECK(tb.reserve(500) == doctest::Approx(1.5e-3));
  CHECK_THROWS_AS(TokenBucket(0.0), ParameterError);
}

namespace {

struct Loopback {
  CollectionServer server;
  std::future<ServeResult> done;
  explicit Loopback(std::size_t nodes, double timeout = 20.0)
      : server(Endpoint{"127.0.0.1", 0}, ServerOptions{nodes, timeout}) {
    done = std::async(std::launch::async, [this] { return server.run(); });
  }
  Endpoint endpoint() const { return Endpoint{"127.0.0.1", server.port()}; }
};

void send_raw(const Endpoint& ep, const std::vector<std::uint8_t>& bytes) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  ::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t k = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (k <= 0) break;
    off += static_cast<std::size_t>(k);
  }
  ::close(fd);
}

}  // namespace

TEST_CASE("loopback: two and eight concurrent nodes arrive intact") {
  for (std::size_t count : {std::size_t{2}, std::size_t{8}}) {
    std::vector<NodeRecording> recs;
    for (std::size_t i = 0; i < count; ++i) {
      recs.push_back(random_recording(static_cast<NodeId>(i + 1), 90000 + 13 * i, 450000, 100 + i));
    }
    Loopback lb(count);
    std::vector<std::future<StreamStats>> clients;
    for (const auto& r : recs) {
      clients.push_back(std::async(std::launch::async, [&r, &lb] {
        return stream_node(r, lb.endpoint(), StreamOptions{kDefaultChunkSamples, 50e6, {}, {}});
      }));
    }
    for (auto& c : clients) CHECK(c.get().frames_sent > 0);
    const auto result = lb.done.get();
    REQUIRE(result.nodes.size() == count);
    CHECK(result.rejected.empty());
    for (const auto& r : recs) {
      const auto& got = result.nodes.at(r.node_id);
      CHECK_FALSE(got.error.has_value());
      CHECK(got.stats.gaps.empty());
      CHECK_FALSE(got.stats.truncated);
      CHECK(recording_digest(got.recording) == recording_digest(r));
      CHECK(got.recording.start_local == doctest::Approx(0.1).epsilon(1e-15));
    }
  }
}

TEST_CASE("loopback: application-level duplicates are dropped") {
  const auto rec = random_recording(5, 60000, 0, 9);
  Loopback lb(1);
  const auto sent = stream_node(rec, lb.endpoint(), StreamOptions{9000, 50e6, {1, 3}, {}});
  CHECK(sent.retransmits == 2);
  const auto result = lb.done.get();
  const auto& got = result.nodes.at(5);
  CHECK(got.stats.duplicates == 2);
  CHECK(recording_digest(got.recording) == recording_digest(rec));
}

TEST_CASE("loopback: failures stay on their own connection") {
  const auto a = random_recording(1, 200000, 0, 1);
  const auto b = random_recording(2, 200000, 0, 2);
  const auto killed = random_recording(3, 200000, 0, 3);
  const auto corrupt = random_recording(4, 200000, 0, 4);
  Loopback lb(4);

  stream_node(a, lb.endpoint(), StreamOptions{9000, 20e6, {}, {}});
  // Same id again while the registry holds node 1.
  auto again = b;
  again.node_id = 1;
  try {
    stream_node(again, lb.endpoint(), StreamOptions{9000, 20e6, {}, {}});
  } catch (const TransportError&) {
    // The server may close before the client finishes writing.
  }
  const std::string http = "GET / HTTP/1.0\r\n\r\n";
  send_raw(lb.endpoint(), std::vector<std::uint8_t>(http.begin(), http.end()));
  auto frames = frames_of(corrupt, 9000);
  auto bytes = concat(frames);
  bytes[3 * (kFrameHeaderSize + 2250 + kFrameCrcSize) + 40] ^= 0x01;  // payload of seq 3

  auto cb = std::async(std::launch::async, [&] { return stream_node(b, lb.endpoint(), StreamOptions{9000, 2e6, {}, {}}); });
  auto ck = std::async(std::launch::async,
                       [&] { return stream_node(killed, lb.endpoint(), StreamOptions{9000, 20e6, {}, 10}); });
  send_raw(lb.endpoint(), bytes);
  CHECK(ck.get().truncated);
  cb.get();
  const auto result = lb.done.get();
  REQUIRE(result.nodes.size() == 4);
  CHECK(recording_digest(result.nodes.at(1).recording) == recording_digest(a));
  CHECK(recording_digest(result.nodes.at(2).recording) == recording_digest(b));
  CHECK_FALSE(result.nodes.at(2).error.has_value());

  const auto& k = result.nodes.at(3);
  CHECK(k.stats.truncated);
  REQUIRE(k.stats.gaps.size() == 1);
  CHECK(k.stats.gaps[0].first == 10);
  CHECK(k.recording.size() == 90000);

  const auto& c = result.nodes.at(4);
  REQUIRE(c.error.has_value());
  CHECK(c.error->find("CRC") != std::string::npos);
  CHECK(c.recording.size() == 27000);  // seq 0..2 survive

  REQUIRE(result.rejected.size() == 2);
  CHECK(result.rejected[0].find("duplicate node id") != std::string::npos);
  CHECK(result.rejected[1].find("magic") != std::string::npos);
}

TEST_CASE("loopback: token-bucket caps are met") {
  for (double cap : {1e6, 9e6, 17e6}) {
    // About 0.3 s of traffic at the cap; two bits per sample plus framing.
    const auto n = static_cast<std::size_t>(cap * 0.3 / 2.0);
    const auto rec = random_recording(6, n, 0, 6);
    Loopback lb(1);
    const auto sent = stream_node(rec, lb.endpoint(), StreamOptions{9000, cap, {}, {}});
    const auto result = lb.done.get();
    CAPTURE(cap);
    CHECK(sent.achieved_rate == doctest::Approx(cap).epsilon(0.05));
    CHECK(recording_digest(result.nodes.at(6).recording) == recording_digest(rec));
  }
}

TEST_CASE("frame codec: header-only frame with both channels") {
  Frame f;
  f.node_id = 1;
  const auto b = encode_frame(f);
  CHECK(b.size() == kFrameHeaderSize + kFrameCrcSize);
  std::size_t used = 0;
  const auto g = decode_frame(b, used);
  REQUIRE(g.has_value());
  CHECK(*g == f);
  CHECK_FALSE(g->is_end());
}

TEST_CASE("loopback: digests match over 100 randomized runs") {
  Rng rng(77);
  for (int run = 0; run < 100; ++run) {
    const auto n = static_cast<std::size_t>(rng.next_u64() % 40000);
    const auto chunk = static_cast<std::size_t>(1 + rng.next_u64() % 12000);
    const auto first = rng.next_u64() % 10000000;
    const auto rec = random_recording(static_cast<NodeId>(run), n, first, rng.next_u64());
    Loopback lb(1);
    stream_node(rec, lb.endpoint(), StreamOptions{chunk, 1e9, {}, {}});
    const auto result = lb.done.get();
    const auto& got = result.nodes.at(static_cast<NodeId>(run));
    CAPTURE(run);
    CHECK(recording_digest(got.recording) == recording_digest(rec));
    CHECK(got.recording.first_sample_index == first);
    CHECK(got.stats.gaps.empty());
  }
}

TEST_CASE("loopback: one second at 17 Mbit/s takes at least 9/17 s") {
  const auto rec = random_recording(1, 4500000, 0, 11);
  Loopback lb(1);
  const auto sent = stream_node(rec, lb.endpoint());
  lb.done.get();
  CHECK(sent.duration >= 9.0 / 17.0);
  CHECK(sent.achieved_rate <= 17.85e6);
  CHECK(sent.achieved_rate > 0.0);
}
