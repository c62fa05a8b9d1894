#include "fedkappa/fed/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

namespace fedkappa::fed {

void Connection::send(const Message& msg) { write_bytes(encode_message(msg)); }

std::optional<Message> Connection::receive() {
  std::vector<std::uint8_t> header(kFrameHeaderSize);
  const auto got = read_bytes(header);
  if (got == 0) return std::nullopt;
  if (got < header.size()) {
    // Report a bad magic before the short read when the prefix already shows it.
    if (got >= 4) (void)decode_header(std::span(header).first(got));
    throw Error(ErrorCode::Truncated, "stream ended inside a frame header");
  }
  const auto h = decode_header(header);
  std::vector<std::uint8_t> payload(h.length);
  if (read_bytes(payload) < payload.size()) {
    throw Error(ErrorCode::Truncated, "frame declares " + std::to_string(h.length) +
                                          " payload bytes but the stream ended early");
  }
  return decode_payload(h.type, payload);
}

namespace {

struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool write_closed = false;
  bool reader_closed = false;
};

class InprocConnection final : public Connection {
 public:
  InprocConnection(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out, std::string name)
      : in_(std::move(in)), out_(std::move(out)), name_(std::move(name)) {}
  ~InprocConnection() override { close(); }

  void write_bytes(std::span<const std::uint8_t> bytes) override {
    std::lock_guard lock(out_->mu);
    if (out_->write_closed || out_->reader_closed) throw Error(ErrorCode::IoError, name_ + ": connection closed");
    out_->bytes.insert(out_->bytes.end(), bytes.begin(), bytes.end());
    out_->cv.notify_all();
  }
  void close_write() override {
    std::lock_guard lock(out_->mu);
    out_->write_closed = true;
    out_->cv.notify_all();
  }
  void close() override {
    close_write();
    std::lock_guard lock(in_->mu);
    in_->reader_closed = true;
    in_->cv.notify_all();
  }
  std::string describe() const override { return name_; }

 protected:
  std::size_t read_bytes(std::span<std::uint8_t> out) override {
    std::size_t n = 0;
    std::unique_lock lock(in_->mu);
    while (n < out.size()) {
      in_->cv.wait(lock, [&] { return !in_->bytes.empty() || in_->write_closed || in_->reader_closed; });
      if (in_->reader_closed) return n;
      if (in_->bytes.empty()) return n;
      while (n < out.size() && !in_->bytes.empty()) {
        out[n++] = in_->bytes.front();
        in_->bytes.pop_front();
      }
    }
    return n;
  }

 private:
  std::shared_ptr<Pipe> in_;
  std::shared_ptr<Pipe> out_;
  std::string name_;
};

class TcpConnection final : public Connection {
 public:
  TcpConnection(int fd, std::string name) : fd_(fd), name_(std::move(name)) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override {
    close();
    if (fd_ >= 0) ::close(fd_);
  }

  void write_bytes(std::span<const std::uint8_t> bytes) override {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const auto n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::IoError, name_ + ": send failed: " + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }
  void close_write() override { ::shutdown(fd_, SHUT_WR); }
  void close() override { ::shutdown(fd_, SHUT_RDWR); }
  std::string describe() const override { return name_; }

 protected:
  std::size_t read_bytes(std::span<std::uint8_t> out) override {
    std::size_t n = 0;
    while (n < out.size()) {
      const auto r = ::recv(fd_, out.data() + n, out.size() - n, 0);
      if (r < 0) {
        if (errno == EINTR) continue;
        if (errno == ECONNRESET || errno == ENOTCONN) return n;
        throw Error(ErrorCode::IoError, name_ + ": recv failed: " + std::strerror(errno));
      }
      if (r == 0) return n;
      n += static_cast<std::size_t>(r);
    }
    return n;
  }

 private:
  int fd_;
  std::string name_;
};

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host == "localhost" || host.empty() ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::IoError, "cannot resolve host '" + host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

std::string peer_name(const sockaddr_in& addr) {
  char buf[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
  return std::string(buf) + ":" + std::to_string(ntohs(addr.sin_port));
}

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inproc_pair() {
  auto a_to_b = std::make_shared<Pipe>();
  auto b_to_a = std::make_shared<Pipe>();
  return {std::make_unique<InprocConnection>(b_to_a, a_to_b, "inproc:a"),
          std::make_unique<InprocConnection>(a_to_b, b_to_a, "inproc:b")};
}

std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::InvalidConfig, "endpoint '" + text + "' is not host:port");
  unsigned port = 0;
  const auto* first = text.data() + colon + 1;
  const auto* last = text.data() + text.size();
  auto [end, ec] = std::from_chars(first, last, port);
  if (ec != std::errc{} || end != last || first == last || port > 65535) {
    throw Error(ErrorCode::InvalidConfig, "bad port in endpoint '" + text + "'");
  }
  return {text.substr(0, colon), static_cast<std::uint16_t>(port)};
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  const auto addr = resolve(host, port);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw Error(ErrorCode::IoError, std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 64) != 0) {
    const std::string why = std::strerror(errno);
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorCode::IoError, "cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
  close();
}

std::unique_ptr<Connection> TcpListener::accept(std::chrono::milliseconds timeout) {
  if (fd_ < 0) return nullptr;
  pollfd pfd{fd_, POLLIN, 0};
  const int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
  if (ready <= 0) return nullptr;
  sockaddr_in peer{};
  socklen_t len = sizeof peer;
  const int fd = ::accept(fd_, reinterpret_cast<sockaddr*>(&peer), &len);
  if (fd < 0) return nullptr;
  return std::make_unique<TcpConnection>(fd, "tcp:" + peer_name(peer));
}

void TcpListener::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<Connection> tcp_connect(const std::string& host, std::uint16_t port,
                                        std::chrono::milliseconds retry_for) {
  const auto addr = resolve(host, port);
  const auto deadline = std::chrono::steady_clock::now() + retry_for;
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error(ErrorCode::IoError, std::string("socket: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      return std::make_unique<TcpConnection>(fd, "tcp:" + peer_name(addr));
    }
    const std::string why = std::strerror(errno);
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw Error(ErrorCode::IoError, "cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
}

Hub::~Hub() { shutdown(std::chrono::milliseconds(0)); }

std::size_t Hub::add(std::unique_ptr<Connection> conn) {
  std::lock_guard lock(mu_);
  if (stopping_) {
    conn->close();
    throw Error(ErrorCode::IoError, "hub is shutting down");
  }
  const std::size_t id = sessions_.size();
  auto s = std::make_unique<Session>();
  s->conn = std::move(conn);
  Connection* raw = s->conn.get();
  s->reader = std::thread([this, id, raw] {
    for (;;) {
      try {
        auto msg = raw->receive();
        if (!msg) {
          push({id, Event::Kind::Closed, std::nullopt, std::nullopt});
          return;
        }
        push({id, Event::Kind::Message, std::move(*msg), std::nullopt});
      } catch (const Error& e) {
        push({id, Event::Kind::Failed, std::nullopt, e});
        return;
      }
    }
  });
  sessions_.push_back(std::move(s));
  return id;
}

void Hub::push(Event e) {
  std::lock_guard lock(mu_);
  if (e.kind != Event::Kind::Message) sessions_[e.session]->ended = true;
  inbox_.push_back(std::move(e));
  cv_.notify_all();
}

std::optional<Hub::Event> Hub::next(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_for(lock, timeout, [&] { return !inbox_.empty(); })) return std::nullopt;
  auto e = std::move(inbox_.front());
  inbox_.pop_front();
  return e;
}

void Hub::send(std::size_t session, const Message& msg) {
  Connection* conn;
  {
    std::lock_guard lock(mu_);
    conn = sessions_.at(session)->conn.get();
  }
  try {
    conn->send(msg);
  } catch (const Error& e) {
    // A failed write is surfaced through the inbox like a read failure.
    std::lock_guard lock(mu_);
    inbox_.push_back({session, Event::Kind::Failed, std::nullopt, e});
    cv_.notify_all();
  }
}

void Hub::close_write(std::size_t session) {
  std::lock_guard lock(mu_);
  sessions_.at(session)->conn->close_write();
}

void Hub::shutdown(std::chrono::milliseconds grace) {
  {
    std::unique_lock lock(mu_);
    if (stopping_) return;
    stopping_ = true;
    cv_.wait_for(lock, grace, [&] {
      for (const auto& s : sessions_) {
        if (!s->ended) return false;
      }
      return true;
    });
    for (auto& s : sessions_) s->conn->close();
  }
  for (auto& s : sessions_) {
    if (s->reader.joinable()) s->reader.join();
  }
}

std::string Hub::describe(std::size_t session) const {
  std::lock_guard lock(mu_);
  return sessions_.at(session)->conn->describe();
}

}  // namespace fedkappa::fed
