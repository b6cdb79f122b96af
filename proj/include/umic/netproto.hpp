#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "umic/error.hpp"
#include "umic/recording.hpp"

namespace umic {

// Wire layout, all integers little-endian:
//   0  magic "UMIC"        4 bytes
//   4  version             u8 (= 1)
//   5  node_id             u16
//   7  seq                 u32, per node, from 0, +1 per frame
//  11  first_sample_index  u64
//  19  channel_mask        u8, bit0 mic, bit1 sync
//  20  payload_len         u32
//  24  payload             mic plane then sync plane, LSB-first bit packing
//   .. crc32               u32 over every preceding byte
// A frame with channel_mask 0 and no payload ends a stream; its
// first_sample_index is one past the last sample sent (the total sample
// count when the stream starts at index 0).

inline constexpr std::uint8_t kFrameVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 24;
inline constexpr std::size_t kFrameCrcSize = 4;
inline constexpr std::uint8_t kChannelMic = 0x01;
inline constexpr std::uint8_t kChannelSync = 0x02;
inline constexpr std::size_t kDefaultChunkSamples = 9000;
inline constexpr double kDefaultRateCap = 17e6;
/// Largest payload a decoder accepts.
inline constexpr std::uint32_t kMaxPayload = 1u << 26;

struct Frame {
  std::uint16_t node_id = 0;
  std::uint32_t seq = 0;
  std::uint64_t first_sample_index = 0;
  std::uint8_t channel_mask = kChannelMic | kChannelSync;
  std::vector<std::uint8_t> payload;

  bool is_end() const noexcept { return channel_mask == 0 && payload.empty(); }
  std::size_t planes() const noexcept;
  friend bool operator==(const Frame&, const Frame&) = default;
};

/// Throws FramingError when the mask has unknown bits, the payload does not
/// split evenly into the active planes, or the payload is too large.
std::vector<std::uint8_t> encode_frame(const Frame& frame);

/// Decodes one frame from the front of `bytes`. Returns nullopt when the
/// buffer does not yet hold a whole frame (`needed` then holds the total
/// byte count required, when known). Throws FramingError on bad magic,
/// version or layout and CorruptionError on a CRC mismatch.
std::optional<Frame> decode_frame(std::span<const std::uint8_t> bytes, std::size_t& consumed,
                                  std::size_t* needed = nullptr);

Frame make_end_frame(std::uint16_t node_id, std::uint32_t seq, std::uint64_t end_index);

/// Data frames of chunk_samples samples (the last one shorter) followed by
/// the end frame. Indices continue from recording.first_sample_index.
std::vector<Frame> frames_of(const NodeRecording& recording, std::size_t chunk_samples = kDefaultChunkSamples);

/// Incremental parser over a byte stream.
class FrameParser {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete frame, or nullopt when more bytes are needed.
  std::optional<Frame> next();
  std::size_t buffered() const noexcept { return buffer_.size() - pos_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t pos_ = 0;
};

struct SeqGap {
  std::uint16_t node_id = 0;
  std::uint32_t first = 0;
  /// Last missing seq; empty when the stream ended without its end frame and
  /// the extent of the loss is unknown.
  std::optional<std::uint32_t> last;
  friend bool operator==(const SeqGap&, const SeqGap&) = default;
};

struct StreamStats {
  std::uint64_t bytes_sent = 0;
  std::uint64_t frames_sent = 0;
  std::uint64_t retransmits = 0;  ///< frames sent again (application-level duplicates)
  std::uint64_t duplicates = 0;   ///< frames dropped by the receiver as repeats
  double duration = 0.0;          ///< seconds
  double achieved_rate = 0.0;     ///< bits per second
  std::vector<SeqGap> gaps;
  bool truncated = false;  ///< stream ended without an end frame
};

/// Rebuilds one node's recording from its frames. Repeated seqs are dropped
/// and counted, missing seqs are recorded as gaps and their samples read as
/// zero. A data frame's length comes from the next frame's first index.
class Reassembler {
 public:
  explicit Reassembler(std::uint16_t node_id, double sample_rate = kNominalSampleRate);

  /// Throws FramingError for a foreign node id, a frame after the end frame
  /// or sample indices that run backwards.
  void push(const Frame& frame);
  bool finished() const noexcept { return ended_; }
  std::uint64_t frames() const noexcept { return frames_; }

  /// Completes the recording; an unterminated stream is marked truncated.
  NodeRecording take(StreamStats& stats);

 private:
  void place(const Frame& f, std::uint64_t count);

  std::uint16_t node_id_;
  double sample_rate_;
  std::uint32_t next_seq_ = 0;
  bool started_ = false;
  bool ended_ = false;
  std::uint64_t base_ = 0;
  std::uint64_t frames_ = 0;
  std::optional<Frame> pending_;
  BitBuffer mic_;
  BitBuffer sync_;
  std::uint64_t duplicates_ = 0;
  std::vector<SeqGap> gaps_;
};

/// Recording files are the frame byte stream a node would send.
void write_recording_file(const std::filesystem::path& path, const NodeRecording& recording,
                          std::size_t chunk_samples = kDefaultChunkSamples);
/// The sample rate is not on the wire; files are read at the nominal rate and
/// start_local = first_sample_index / rate. Throws FramingError or
/// CorruptionError for damaged files, Error when the file cannot be read.
NodeRecording read_recording_file(const std::filesystem::path& path, StreamStats* stats = nullptr);

/// Hex SHA-256 over the sample count, the mic plane and the sync plane.
std::string recording_digest(const NodeRecording& recording);

// ---------------------------------------------------------------------------
// Transport

/// Raised by stream_node; carries what was sent before the failure.
class StreamError : public TransportError {
 public:
  StreamError(const std::string& what, StreamStats partial)
      : TransportError(what), partial_(std::move(partial)) {}
  const StreamStats& partial() const noexcept { return partial_; }

 private:
  StreamStats partial_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Parses "host:port"; throws ParameterError.
Endpoint parse_endpoint(const std::string& text);

/// Client-side pacing: the bucket starts empty and fills at `rate` bits per
/// second, so the message completing cumulative bit count B is released at
/// start + B / rate.
class TokenBucket {
 public:
  explicit TokenBucket(double rate);
  /// Seconds from start until `bits` more bits may go out (and records them).
  double reserve(std::uint64_t bits);
  double rate() const noexcept { return rate_; }

 private:
  double rate_;
  std::uint64_t total_bits_ = 0;
};

struct StreamOptions {
  std::size_t chunk_samples = kDefaultChunkSamples;
  double rate_cap = kDefaultRateCap;  ///< bits per second
  std::vector<std::uint32_t> duplicate_seqs;  ///< resend these frames once (tests)
  std::optional<std::size_t> abort_after_frames;  ///< drop the connection early (tests)
};

/// Sends the recording as frames in seq order over TCP, paced by a token
/// bucket. Throws StreamError (a TransportError) on connection failure.
StreamStats stream_node(const NodeRecording& recording, const Endpoint& endpoint,
                        const StreamOptions& options = {});

struct ServerOptions {
  std::size_t expected_nodes = 1;
  double timeout = 60.0;  ///< seconds to wait for all expected nodes
};

struct NodeResult {
  NodeRecording recording;
  StreamStats stats;
  std::optional<std::string> error;  ///< per-connection failure
};

struct ServeResult {
  std::map<NodeId, NodeResult> nodes;
  std::vector<std::string> rejected;  ///< connections refused before registration
};

/// Collection server: one handler thread per connection, a shared registry
/// under a mutex. A connection whose first frame names a node id that is
/// already registered is rejected; decode failures end only their own
/// connection. run() returns once expected_nodes registered connections have
/// ended, or throws TransportError on timeout.
class CollectionServer {
 public:
  CollectionServer(const Endpoint& bind, const ServerOptions& options);
  ~CollectionServer();
  CollectionServer(const CollectionServer&) = delete;
  CollectionServer& operator=(const CollectionServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  ServeResult run();

 private:
  struct State;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  ServerOptions options_;
  std::unique_ptr<State> state_;
};

/// Binds, then runs a CollectionServer to completion.
ServeResult serve(const Endpoint& bind, const ServerOptions& options);

}  // namespace umic
