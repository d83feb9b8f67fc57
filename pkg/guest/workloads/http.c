/* Static-file GET handler.
 *
 * One request, one virtine, exactly seven host interactions on the happy
 * path: read(request), stat, open, read(file), write(response), close,
 * exit.  Error paths answer 400/403/404 with fewer calls.
 */

#include "virtine.h"

#define BODY_MAX 8192

static char request[2048];
static char path[1024];
static char body[BODY_MAX];
static char response[BODY_MAX + 256];
static struct vstat_record st;

static unsigned long build_response(const char *status, const char *payload,
                                    unsigned long payload_len)
{
    static const char ct[] = "Content-Type: text/plain\r\n\r\n";
    unsigned long o = 0;

    memcpy(response + o, "HTTP/1.0 ", 9); o += 9;
    memcpy(response + o, status, strlen(status)); o += strlen(status);
    memcpy(response + o, "\r\nContent-Length: ", 18); o += 18;
    o += format_u64(response + o, payload_len);
    memcpy(response + o, "\r\n", 2); o += 2;
    memcpy(response + o, ct, sizeof(ct) - 1); o += sizeof(ct) - 1;
    memcpy(response + o, payload, payload_len); o += payload_len;
    return o;
}

static void respond_and_exit(const char *status, const char *payload,
                             unsigned long payload_len)
{
    unsigned long n = build_response(status, payload, payload_len);
    vwrite(0, response, n);
    vexit(0);
}

int main(void)
{
    i64 n = vread(0, request, sizeof(request) - 1);
    if (n < 5 || memcmp(request, "GET ", 4) != 0)
        respond_and_exit("400 Bad Request", "bad request\n", 12);

    /* Extract the path between "GET " and the next space. */
    unsigned long i = 4, p = 0;
    while (i < (unsigned long)n && request[i] == '/')
        i++;
    while (i < (unsigned long)n && request[i] != ' ' && request[i] != '\r'
           && p < sizeof(path) - 1)
        path[p++] = request[i++];
    if (p == 0) {
        memcpy(path, "index.html", 10);
        p = 10;
    }

    i64 sr = vstat(path, p, &st);
    if (sr < 0) {
        if (sr == -13)
            respond_and_exit("403 Forbidden", "no such file\n", 13);
        respond_and_exit("404 Not Found", "no such file\n", 13);
    }

    u64 size = st.size > BODY_MAX ? BODY_MAX : st.size;
    i64 fd = vopen(path, p, 0);
    if (fd < 0)
        respond_and_exit("404 Not Found", "no such file\n", 13);

    i64 got = vread(fd, body, size);
    if (got < 0)
        got = 0;
    unsigned long total = build_response("200 OK", body, (unsigned long)got);
    vwrite(0, response, total);
    vclose(fd);
    return 0;
}
